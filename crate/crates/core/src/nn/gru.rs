use rand::Rng;

use super::linalg::gemm;
use super::params::{ParamRange, ParamStore};
use super::Act;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One direction of a GRU layer with gates ordered (reset, update, new):
///
/// ```text
/// r = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruDirection {
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
    w_ih: ParamRange,
    w_hh: ParamRange,
    b_ih: ParamRange,
    b_hh: ParamRange,
}

#[derive(Debug, Clone)]
struct DirCache {
    /// Hidden state before each step, `(T + 1) x H` in processing order.
    hs: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    /// `W_hn h + b_hn` per step.
    ghn: Vec<f64>,
}

impl GruDirection {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, reverse: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.uniform(&format!("{name}.w_ih"), &[3 * hidden, input], bound, rng);
        let w_hh = store.uniform(&format!("{name}.w_hh"), &[3 * hidden, hidden], bound, rng);
        let b_ih = store.uniform(&format!("{name}.b_ih"), &[3 * hidden], bound, rng);
        let b_hh = store.uniform(&format!("{name}.b_hh"), &[3 * hidden], bound, rng);
        Self {
            input,
            hidden,
            reverse,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
        }
    }

    fn frame_at(&self, step: usize, frames: usize) -> usize {
        if self.reverse {
            frames - 1 - step
        } else {
            step
        }
    }

    fn forward(&self, params: &[f64], x: &Act) -> (Vec<f64>, DirCache) {
        let (h, t_len) = (self.hidden, x.frames);
        let g3 = 3 * h;
        let mut gi = vec![0.0; t_len * g3];
        let b_ih = &params[self.b_ih.range()];
        for t in 0..t_len {
            gi[t * g3..(t + 1) * g3].copy_from_slice(b_ih);
        }
        gemm(
            t_len,
            self.input,
            g3,
            1.0,
            &x.data,
            (self.input, 1),
            &params[self.w_ih.range()],
            (1, self.input),
            1.0,
            &mut gi,
            (g3, 1),
        );
        let w_hh = &params[self.w_hh.range()];
        let b_hh = &params[self.b_hh.range()];
        let mut cache = DirCache {
            hs: vec![0.0; (t_len + 1) * h],
            r: vec![0.0; t_len * h],
            z: vec![0.0; t_len * h],
            n: vec![0.0; t_len * h],
            ghn: vec![0.0; t_len * h],
        };
        let mut gh = vec![0.0; g3];
        for s in 0..t_len {
            let t = self.frame_at(s, t_len);
            let (before, after) = cache.hs.split_at_mut((s + 1) * h);
            let h_prev = &before[s * h..];
            let h_next = &mut after[..h];
            for (g, out) in gh.iter_mut().enumerate() {
                let row = &w_hh[g * h..(g + 1) * h];
                *out = b_hh[g] + row.iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
            }
            let gi_t = &gi[t * g3..(t + 1) * g3];
            for j in 0..h {
                let r = sigmoid(gi_t[j] + gh[j]);
                let z = sigmoid(gi_t[h + j] + gh[h + j]);
                let n = (gi_t[2 * h + j] + r * gh[2 * h + j]).tanh();
                h_next[j] = (1.0 - z) * n + z * h_prev[j];
                cache.r[s * h + j] = r;
                cache.z[s * h + j] = z;
                cache.n[s * h + j] = n;
                cache.ghn[s * h + j] = gh[2 * h + j];
            }
        }
        let last = cache.hs[t_len * h..].to_vec();
        (last, cache)
    }

    fn backward(&self, params: &[f64], grads: &mut [f64], x: &Act, cache: &DirCache, dh_final: &[f64]) -> Act {
        let (h, t_len) = (self.hidden, x.frames);
        let g3 = 3 * h;
        let w_hh = &params[self.w_hh.range()];
        let mut dgi = vec![0.0; t_len * g3];
        let mut dh = dh_final.to_vec();
        let mut dgh = vec![0.0; g3];
        let mut dw_hh = vec![0.0; g3 * h];
        let mut db_hh = vec![0.0; g3];
        for s in (0..t_len).rev() {
            let t = self.frame_at(s, t_len);
            let h_prev = &cache.hs[s * h..(s + 1) * h];
            let mut dh_prev = vec![0.0; h];
            for j in 0..h {
                let (r, z, n, ghn) = (
                    cache.r[s * h + j],
                    cache.z[s * h + j],
                    cache.n[s * h + j],
                    cache.ghn[s * h + j],
                );
                let d = dh[j];
                let dn_pre = d * (1.0 - z) * (1.0 - n * n);
                let dz_pre = d * (h_prev[j] - n) * z * (1.0 - z);
                let dr_pre = dn_pre * ghn * r * (1.0 - r);
                dh_prev[j] = d * z;
                let dgi_t = &mut dgi[t * g3..(t + 1) * g3];
                dgi_t[j] = dr_pre;
                dgi_t[h + j] = dz_pre;
                dgi_t[2 * h + j] = dn_pre;
                dgh[j] = dr_pre;
                dgh[h + j] = dz_pre;
                dgh[2 * h + j] = dn_pre * r;
            }
            for (g, &d) in dgh.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                db_hh[g] += d;
                let row = &w_hh[g * h..(g + 1) * h];
                dw_hh[g * h..(g + 1) * h]
                    .iter_mut()
                    .zip(h_prev)
                    .for_each(|(w, hp)| *w += d * hp);
                dh_prev.iter_mut().zip(row).for_each(|(a, w)| *a += d * w);
            }
            dh = dh_prev;
        }
        grads[self.w_hh.range()]
            .iter_mut()
            .zip(&dw_hh)
            .for_each(|(g, d)| *g += d);
        grads[self.b_hh.range()]
            .iter_mut()
            .zip(&db_hh)
            .for_each(|(g, d)| *g += d);
        {
            let gb = &mut grads[self.b_ih.range()];
            for t in 0..t_len {
                gb.iter_mut()
                    .zip(&dgi[t * g3..(t + 1) * g3])
                    .for_each(|(g, d)| *g += d);
            }
        }
        gemm(
            g3,
            t_len,
            self.input,
            1.0,
            &dgi,
            (1, g3),
            &x.data,
            (self.input, 1),
            1.0,
            &mut grads[self.w_ih.range()],
            (self.input, 1),
        );
        let mut dx = Act::zeros(t_len, self.input);
        gemm(
            t_len,
            g3,
            self.input,
            1.0,
            &dgi,
            (g3, 1),
            &params[self.w_ih.range()],
            (self.input, 1),
            0.0,
            &mut dx.data,
            (self.input, 1),
        );
        dx
    }
}

/// Single-layer bidirectional GRU returning `[h_forward_final | h_backward_final]`.
#[derive(Debug, Clone, Copy)]
pub struct BiGru {
    pub fwd: GruDirection,
    pub bwd: GruDirection,
}

#[derive(Debug, Clone)]
pub struct BiGruCache {
    fwd: DirCache,
    bwd: DirCache,
}

impl BiGru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let fwd = GruDirection::new(store, &format!("{name}.fwd"), input, hidden, false, rng);
        let bwd = GruDirection::new(store, &format!("{name}.bwd"), input, hidden, true, rng);
        Self { fwd, bwd }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn forward(&self, params: &[f64], x: &Act) -> (Vec<f64>, BiGruCache) {
        assert!(x.frames > 0, "empty sequence");
        let (hf, cf) = self.fwd.forward(params, x);
        let (hb, cb) = self.bwd.forward(params, x);
        let mut out = hf;
        out.extend(hb);
        (out, BiGruCache { fwd: cf, bwd: cb })
    }

    pub fn backward(&self, params: &[f64], grads: &mut [f64], x: &Act, cache: &BiGruCache, dh: &[f64]) -> Act {
        let h = self.hidden();
        let mut dx = self.fwd.backward(params, grads, x, &cache.fwd, &dh[..h]);
        dx.add_assign(&self.bwd.backward(params, grads, x, &cache.bwd, &dh[h..]));
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bigru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, "g", 3, 4, &mut rng);
        let x = Act::from_data(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let probe: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |p: &[f64], x: &Act| -> f64 {
            gru.forward(p, x).0.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = gru.forward(&store.values, &x);
        let mut grads = store.zeros_like();
        let dx = gru.backward(&store.values, &mut grads, &x, &cache, &probe);
        let eps = 1e-6;
        for i in 0..store.len() {
            let mut p = store.values.clone();
            p[i] += eps;
            let up = objective(&p, &x);
            p[i] -= 2.0 * eps;
            let fd = (up - objective(&p, &x)) / (2.0 * eps);
            assert!((fd - grads[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grads[i]);
        }
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let up = objective(&store.values, &xp);
            xp.data[i] -= 2.0 * eps;
            let fd = (up - objective(&store.values, &xp)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-7, "input {i}");
        }
    }

    #[test]
    fn reversal_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, "g", 2, 3, &mut rng);
        let x = Act::from_data(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut rev = Act::zeros(4, 2);
        for t in 0..4 {
            rev.row_mut(t).copy_from_slice(x.row(3 - t));
        }
        let (a, _) = gru.forward(&store.values, &x);
        let (b, _) = gru.forward(&store.values, &rev);
        assert_ne!(a, b);
    }
}
