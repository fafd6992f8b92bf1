use rand::Rng;

use super::linalg::gemm;
use super::params::{ParamRange, ParamStore};
use super::Act;

/// 1-D convolution over frames with zero padding `kernel / 2`.
///
/// Weights are `[out, kernel * in]` with column `j * in + c` for tap `j` of
/// input channel `c`.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    weight: ParamRange,
    bias: ParamRange,
}

/// Saved im2col matrix (for [`Conv1d`]) or input (for [`ConvTranspose1d`]).
#[derive(Debug, Clone)]
pub struct ConvCache {
    frames_in: usize,
    saved: Vec<f64>,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_channels, fan_in], bound, rng);
        let bias = store.uniform(&format!("{name}.bias"), &[out_channels], bound, rng);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight,
            bias,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_frames(&self, frames_in: usize) -> usize {
        (frames_in + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, params: &[f64], x: &Act) -> (Act, ConvCache) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let t_out = self.out_frames(x.frames);
        let width = self.kernel * self.in_channels;
        let mut col = vec![0.0; t_out * width];
        for t in 0..t_out {
            for j in 0..self.kernel {
                let src = (t * self.stride + j) as isize - self.pad() as isize;
                if src >= 0 && (src as usize) < x.frames {
                    let dst = t * width + j * self.in_channels;
                    col[dst..dst + self.in_channels].copy_from_slice(x.row(src as usize));
                }
            }
        }
        let w = &params[self.weight.range()];
        let b = &params[self.bias.range()];
        let mut y = Act::zeros(t_out, self.out_channels);
        for t in 0..t_out {
            y.row_mut(t).copy_from_slice(b);
        }
        gemm(
            t_out,
            width,
            self.out_channels,
            1.0,
            &col,
            (width, 1),
            w,
            (1, width),
            1.0,
            &mut y.data,
            (self.out_channels, 1),
        );
        (
            y,
            ConvCache {
                frames_in: x.frames,
                saved: col,
            },
        )
    }

    pub fn backward(&self, params: &[f64], grads: &mut [f64], cache: &ConvCache, dy: &Act) -> Act {
        let t_out = dy.frames;
        let width = self.kernel * self.in_channels;
        let col = &cache.saved;
        gemm(
            self.out_channels,
            t_out,
            width,
            1.0,
            &dy.data,
            (1, self.out_channels),
            col,
            (width, 1),
            1.0,
            &mut grads[self.weight.range()],
            (width, 1),
        );
        let db = &mut grads[self.bias.range()];
        for t in 0..t_out {
            db.iter_mut().zip(dy.row(t)).for_each(|(g, d)| *g += d);
        }
        let w = &params[self.weight.range()];
        let mut dcol = vec![0.0; t_out * width];
        gemm(
            t_out,
            self.out_channels,
            width,
            1.0,
            &dy.data,
            (self.out_channels, 1),
            w,
            (width, 1),
            0.0,
            &mut dcol,
            (width, 1),
        );
        let mut dx = Act::zeros(cache.frames_in, self.in_channels);
        for t in 0..t_out {
            for j in 0..self.kernel {
                let src = (t * self.stride + j) as isize - self.pad() as isize;
                if src >= 0 && (src as usize) < cache.frames_in {
                    let from = &dcol[t * width + j * self.in_channels..][..self.in_channels];
                    dx.row_mut(src as usize)
                        .iter_mut()
                        .zip(from)
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        dx
    }
}

/// Stride-2, kernel-3 transposed convolution that exactly doubles the frame
/// count (padding 1, output padding 1).
///
/// Weights are `[in, 3 * out]` with column `j * out + o`.
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose1d {
    pub in_channels: usize,
    pub out_channels: usize,
    weight: ParamRange,
    bias: ParamRange,
}

const UP_KERNEL: usize = 3;
const UP_STRIDE: usize = 2;

impl ConvTranspose1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_channels * UP_KERNEL) as f64).sqrt();
        let weight = store.uniform(
            &format!("{name}.weight"),
            &[in_channels, UP_KERNEL * out_channels],
            bound,
            rng,
        );
        let bias = store.uniform(&format!("{name}.bias"), &[out_channels], bound, rng);
        Self {
            in_channels,
            out_channels,
            weight,
            bias,
        }
    }

    /// Output frame hit by input frame `i` through tap `j`.
    fn target(i: usize, j: usize, t_out: usize) -> Option<usize> {
        let o = (i * UP_STRIDE + j) as isize - 1;
        (o >= 0 && (o as usize) < t_out).then_some(o as usize)
    }

    pub fn forward(&self, params: &[f64], x: &Act) -> (Act, ConvCache) {
        assert_eq!(x.channels, self.in_channels, "transposed conv input channels");
        let t_out = x.frames * UP_STRIDE;
        let width = UP_KERNEL * self.out_channels;
        let w = &params[self.weight.range()];
        let mut z = vec![0.0; x.frames * width];
        gemm(
            x.frames,
            self.in_channels,
            width,
            1.0,
            &x.data,
            (self.in_channels, 1),
            w,
            (width, 1),
            0.0,
            &mut z,
            (width, 1),
        );
        let mut y = Act::zeros(t_out, self.out_channels);
        let b = &params[self.bias.range()];
        for t in 0..t_out {
            y.row_mut(t).copy_from_slice(b);
        }
        for i in 0..x.frames {
            for j in 0..UP_KERNEL {
                if let Some(o) = Self::target(i, j, t_out) {
                    let from = &z[i * width + j * self.out_channels..][..self.out_channels];
                    y.row_mut(o).iter_mut().zip(from).for_each(|(a, b)| *a += b);
                }
            }
        }
        (
            y,
            ConvCache {
                frames_in: x.frames,
                saved: x.data.clone(),
            },
        )
    }

    pub fn backward(&self, params: &[f64], grads: &mut [f64], cache: &ConvCache, dy: &Act) -> Act {
        let t_in = cache.frames_in;
        let t_out = dy.frames;
        let width = UP_KERNEL * self.out_channels;
        let db = &mut grads[self.bias.range()];
        for t in 0..t_out {
            db.iter_mut().zip(dy.row(t)).for_each(|(g, d)| *g += d);
        }
        let mut dz = vec![0.0; t_in * width];
        for i in 0..t_in {
            for j in 0..UP_KERNEL {
                if let Some(o) = Self::target(i, j, t_out) {
                    dz[i * width + j * self.out_channels..][..self.out_channels]
                        .copy_from_slice(dy.row(o));
                }
            }
        }
        gemm(
            self.in_channels,
            t_in,
            width,
            1.0,
            &cache.saved,
            (1, self.in_channels),
            &dz,
            (width, 1),
            1.0,
            &mut grads[self.weight.range()],
            (width, 1),
        );
        let w = &params[self.weight.range()];
        let mut dx = Act::zeros(t_in, self.in_channels);
        gemm(
            t_in,
            width,
            self.in_channels,
            1.0,
            &dz,
            (width, 1),
            w,
            (1, width),
            0.0,
            &mut dx.data,
            (self.in_channels, 1),
        );
        dx
    }
}

/// Parametric ReLU with one learned negative slope per channel.
#[derive(Debug, Clone, Copy)]
pub struct PRelu {
    pub channels: usize,
    slope: ParamRange,
}

impl PRelu {
    pub const INIT_SLOPE: f64 = 0.25;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let slope = store.constant(&format!("{name}.slope"), &[channels], Self::INIT_SLOPE);
        Self { channels, slope }
    }

    /// Returns the activation; the caller keeps `x` for the backward pass.
    pub fn forward(&self, params: &[f64], x: &Act) -> Act {
        let a = &params[self.slope.range()];
        let mut y = x.clone();
        for t in 0..y.frames {
            for (v, &s) in y.row_mut(t).iter_mut().zip(a) {
                if *v <= 0.0 {
                    *v *= s;
                }
            }
        }
        y
    }

    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: &Act, dy: &Act) -> Act {
        let a = &params[self.slope.range()];
        let mut dx = dy.clone();
        let ga = &mut grads[self.slope.range()];
        for t in 0..x.frames {
            let xr = x.row(t);
            for (c, d) in dx.row_mut(t).iter_mut().enumerate() {
                if xr[c] <= 0.0 {
                    ga[c] += *d * xr[c];
                    *d *= a[c];
                }
            }
        }
        dx
    }
}

/// Lookup table `[count, dim]`.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub count: usize,
    pub dim: usize,
    table: ParamRange,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.uniform(&format!("{name}.table"), &[count, dim], 1.0, rng);
        Self { count, dim, table }
    }

    pub fn table_range(&self) -> ParamRange {
        self.table
    }

    pub fn forward(&self, params: &[f64], labels: &[usize]) -> Act {
        let table = &params[self.table.range()];
        let mut out = Act::zeros(labels.len(), self.dim);
        for (t, &l) in labels.iter().enumerate() {
            assert!(l < self.count, "label {l} outside embedding table");
            out.row_mut(t).copy_from_slice(&table[l * self.dim..(l + 1) * self.dim]);
        }
        out
    }

    pub fn backward(&self, grads: &mut [f64], labels: &[usize], dy: &Act) {
        let g = &mut grads[self.table.range()];
        for (t, &l) in labels.iter().enumerate() {
            g[l * self.dim..(l + 1) * self.dim]
                .iter_mut()
                .zip(dy.row(t))
                .for_each(|(a, b)| *a += b);
        }
    }
}

/// Affine map `y = W x + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    weight: ParamRange,
    bias: ParamRange,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_features, in_features], bound, rng);
        let bias = store.uniform(&format!("{name}.bias"), &[out_features], bound, rng);
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn weight_range(&self) -> ParamRange {
        self.weight
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &params[self.weight.range()];
        let mut y = params[self.bias.range()].to_vec();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * self.in_features..(o + 1) * self.in_features];
            *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        y
    }

    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: &[f64], dy: &[f64]) -> Vec<f64> {
        let w = &params[self.weight.range()];
        let mut dx = vec![0.0; self.in_features];
        {
            let gw = &mut grads[self.weight.range()];
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let grow = &mut gw[o * self.in_features..(o + 1) * self.in_features];
                grow.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
                let row = &w[o * self.in_features..(o + 1) * self.in_features];
                dx.iter_mut().zip(row).for_each(|(g, wi)| *g += d * wi);
            }
        }
        grads[self.bias.range()]
            .iter_mut()
            .zip(dy)
            .for_each(|(g, d)| *g += d);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_act(rng: &mut ChaCha8Rng, frames: usize, channels: usize) -> Act {
        Act::from_data(
            frames,
            channels,
            (0..frames * channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    /// Checks analytic parameter and input gradients of `sum(y * probe)`
    /// against central differences.
    fn check<F, B>(store: &ParamStore, x: &Act, forward: F, backward: B)
    where
        F: Fn(&[f64], &Act) -> Act,
        B: Fn(&[f64], &mut [f64], &Act, &Act) -> Act,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = forward(&store.values, x);
        let probe = random_act(&mut rng, y.frames, y.channels);
        let objective = |p: &[f64], x: &Act| -> f64 {
            forward(p, x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let mut grads = store.zeros_like();
        let dx = backward(&store.values, &mut grads, x, &probe);
        let eps = 1e-6;
        for i in 0..store.len() {
            let mut p = store.values.clone();
            p[i] += eps;
            let up = objective(&p, x);
            p[i] -= 2.0 * eps;
            let down = objective(&p, x);
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - grads[i]).abs() < 1e-6, "param {i}: fd {fd} vs {}", grads[i]);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let up = objective(&store.values, &xp);
            xp.data[i] -= 2.0 * eps;
            let down = objective(&store.values, &xp);
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6, "input {i}: fd {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn conv_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let c = Conv1d::new(&mut store, "c", 3, 5, 3, 2, &mut rng);
        assert_eq!(c.out_frames(8), 4);
        assert_eq!(c.out_frames(7), 4);
        let u = ConvTranspose1d::new(&mut store, "u", 5, 3, &mut rng);
        let x = random_act(&mut rng, 4, 5);
        assert_eq!(u.forward(&store.values, &x).0.frames, 8);
    }

    #[test]
    fn conv_gradients() {
        for stride in [1, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut store = ParamStore::new();
            let c = Conv1d::new(&mut store, "c", 3, 4, 3, stride, &mut rng);
            let x = random_act(&mut rng, 7, 3);
            check(
                &store,
                &x,
                |p, x| c.forward(p, x).0,
                |p, g, x, dy| {
                    let (_, cache) = c.forward(p, x);
                    c.backward(p, g, &cache, dy)
                },
            );
        }
    }

    #[test]
    fn pointwise_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let c = Conv1d::new(&mut store, "p", 4, 2, 1, 1, &mut rng);
        let x = random_act(&mut rng, 5, 4);
        check(
            &store,
            &x,
            |p, x| c.forward(p, x).0,
            |p, g, x, dy| {
                let (_, cache) = c.forward(p, x);
                c.backward(p, g, &cache, dy)
            },
        );
    }

    #[test]
    fn transposed_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let u = ConvTranspose1d::new(&mut store, "u", 3, 2, &mut rng);
        let x = random_act(&mut rng, 4, 3);
        check(
            &store,
            &x,
            |p, x| u.forward(p, x).0,
            |p, g, x, dy| {
                let (_, cache) = u.forward(p, x);
                u.backward(p, g, &cache, dy)
            },
        );
    }

    #[test]
    fn prelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let a = PRelu::new(&mut store, "a", 3);
        store.values = vec![0.1, 0.25, -0.3];
        let x = random_act(&mut rng, 6, 3);
        check(
            &store,
            &x,
            |p, x| a.forward(p, x),
            |p, g, x, dy| a.backward(p, g, x, dy),
        );
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 4, 3, &mut rng);
        let x = random_act(&mut rng, 1, 4);
        check(
            &store,
            &x,
            |p, x| Act::from_data(1, 3, l.forward(p, &x.data)),
            |p, g, x, dy| Act::from_data(1, 4, l.backward(p, g, &x.data, &dy.data)),
        );
    }
}
