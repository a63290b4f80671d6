//! Minimal dense CNN primitives with hand-written backward passes.

use rand::Rng;

/// Channel-major (C×H×W) feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Reorders to H×W×C so each spatial cell is a contiguous vector.
    pub fn to_hwc(&self) -> Vec<f64> {
        let p = self.plane();
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for (i, v) in self.channel(c).iter().enumerate() {
                out[i * self.channels + c] = *v;
            }
        }
        debug_assert_eq!(out.len(), p * self.channels);
        out
    }

    /// Inverse of [`FeatureMap::to_hwc`].
    pub fn from_hwc(channels: usize, height: usize, width: usize, hwc: &[f64]) -> Self {
        let mut fm = FeatureMap::zeros(channels, height, width);
        let p = height * width;
        for i in 0..p {
            for c in 0..channels {
                fm.data[c * p + i] = hwc[i * channels + c];
            }
        }
        fm
    }
}

/// 2-D convolution (square kernel, symmetric zero padding) lowered to a
/// matrix product over im2col columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// out_channels × (in_channels · kernel²)
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    /// He-uniform initialized convolution.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height + 2 * self.padding - self.kernel) / self.stride + 1,
            (width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Lowers the input to a (in·k²) × (oh·ow) column matrix.
    pub fn im2col(&self, x: &FeatureMap) -> Vec<f64> {
        if self.is_pointwise() {
            return x.data.clone();
        }
        let (oh, ow) = self.output_size(x.height, x.width);
        let n = oh * ow;
        let k = self.kernel;
        let mut cols = vec![0.0; self.fan_in() * n];
        for ic in 0..self.in_channels {
            let plane = x.channel(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ic * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < x.width as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], height: usize, width: usize) -> FeatureMap {
        if self.is_pointwise() {
            return FeatureMap {
                channels: self.in_channels,
                height,
                width,
                data: cols.to_vec(),
            };
        }
        let (oh, ow) = self.output_size(height, width);
        let n = oh * ow;
        let k = self.kernel;
        let mut x = FeatureMap::zeros(self.in_channels, height, width);
        for ic in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ic * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let base = ic * height * width + iy as usize * width;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < width as isize {
                                x.data[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Forward pass; also returns the column matrix needed by `backward`.
    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, Vec<f64>) {
        debug_assert_eq!(x.channels, self.in_channels);
        let (oh, ow) = self.output_size(x.height, x.width);
        let n = oh * ow;
        let kk = self.fan_in();
        let cols = self.im2col(x);
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        for oc in 0..self.out_channels {
            let dst = &mut out.data[oc * n..(oc + 1) * n];
            dst.fill(self.bias[oc]);
            let wrow = &self.weight[oc * kk..(oc + 1) * kk];
            for (r, &w) in wrow.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src = &cols[r * n..(r + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        (out, cols)
    }

    /// Accumulates parameter gradients (weights then bias, into `grad`) and
    /// optionally returns the gradient w.r.t. the input.
    pub fn backward(
        &self,
        input_size: (usize, usize),
        cols: &[f64],
        grad_out: &FeatureMap,
        grad: &mut [f64],
        need_input: bool,
    ) -> Option<FeatureMap> {
        let n = grad_out.plane();
        let kk = self.fan_in();
        let (gw, gb) = grad.split_at_mut(self.weight.len());
        for oc in 0..self.out_channels {
            let go = grad_out.channel(oc);
            gb[oc] += go.iter().sum::<f64>();
            let gwrow = &mut gw[oc * kk..(oc + 1) * kk];
            for (r, g) in gwrow.iter_mut().enumerate() {
                let src = &cols[r * n..(r + 1) * n];
                *g += src.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if !need_input {
            return None;
        }
        let mut gcols = vec![0.0; kk * n];
        for oc in 0..self.out_channels {
            let go = grad_out.channel(oc);
            let wrow = &self.weight[oc * kk..(oc + 1) * kk];
            for (r, &w) in wrow.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let dst = &mut gcols[r * n..(r + 1) * n];
                for (d, g) in dst.iter_mut().zip(go) {
                    *d += w * g;
                }
            }
        }
        Some(self.col2im(&gcols, input_size.0, input_size.1))
    }

    pub fn write_parameters(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    /// Reads weights then bias; returns the number of values consumed.
    pub fn read_parameters(&mut self, src: &[f64]) -> usize {
        let nw = self.weight.len();
        let nb = self.bias.len();
        self.weight.copy_from_slice(&src[..nw]);
        self.bias.copy_from_slice(&src[nw..nw + nb]);
        nw + nb
    }

    /// Applies `param -= step[i]` over the flattened (weight, bias) layout.
    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

pub fn relu_in_place(x: &mut FeatureMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` by the positive part of the ReLU output.
pub fn relu_backward(output: &FeatureMap, grad: &mut FeatureMap) {
    for (g, o) in grad.data.iter_mut().zip(&output.data) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let (oh, ow) = conv.output_size(x.height, x.width);
        let k = conv.kernel;
        let mut out = FeatureMap::zeros(conv.out_channels, oh, ow);
        for oc in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[oc];
                    for ic in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= x.height as isize
                                    || ix >= x.width as isize
                                {
                                    continue;
                                }
                                let w =
                                    conv.weight[((oc * conv.in_channels + ic) * k + ky) * k + kx];
                                acc += w * x.data
                                    [(ic * x.height + iy as usize) * x.width + ix as usize];
                            }
                        }
                    }
                    out.data[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap {
            channels: c,
            height: h,
            width: w,
            data: (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, p) in [(3, 2, 1), (3, 1, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new(3, 4, k, s, p, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_map(&mut rng, 3, 7, 6);
            let (fast, _) = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = random_map(&mut rng, 2, 5, 5);
        let upstream = {
            let (o, _) = conv.forward(&x);
            random_map(&mut rng, o.channels, o.height, o.width)
        };
        let loss = |c: &Conv2d, x: &FeatureMap| -> f64 {
            let (o, _) = c.forward(x);
            o.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
        };
        let (_, cols) = conv.forward(&x);
        let mut grad = vec![0.0; conv.num_parameters()];
        let gx = conv
            .backward((5, 5), &cols, &upstream, &mut grad, true)
            .unwrap();
        let h = 1e-6;
        for i in [0, 7, 20, conv.weight.len(), conv.num_parameters() - 1] {
            let mut plus = conv.clone();
            let mut minus = conv.clone();
            *plus.parameters_mut().nth(i).unwrap() += h;
            *minus.parameters_mut().nth(i).unwrap() -= h;
            let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-6,
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
        for i in [0, 13, 49] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - gx.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn hwc_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_map(&mut rng, 3, 2, 4);
        let back = FeatureMap::from_hwc(3, 2, 4, &x.to_hwc());
        assert_eq!(back, x);
    }
}
