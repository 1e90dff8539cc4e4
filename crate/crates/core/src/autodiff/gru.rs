use rand::Rng;

use super::{sigmoid, Array, Layer, Mode, Tensor};
use crate::{Error, Result};

/// One direction of a GRU layer.
///
/// Gate blocks are packed `[update z | reset r | candidate h]` along the
/// last axis of `w` (`[input, 3H]`), `u` (`[H, 3H]`) and `b` (`[3H]`):
///
/// ```text
/// z_t = σ(x_t W_z + h_{t-1} U_z + b_z)
/// r_t = σ(x_t W_r + h_{t-1} U_r + b_r)
/// c_t = tanh(x_t W_h + (r_t ⊙ h_{t-1}) U_h + b_h)
/// h_t = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ c_t
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

/// Per-step values kept for backpropagation through time.
#[derive(Clone, Debug, Default)]
struct StepCache {
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
    h_prev: Vec<f64>,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::glorot(&[input, 3 * hidden], input, 3 * hidden, rng),
            u: Tensor::glorot(&[hidden, 3 * hidden], hidden, 3 * hidden, rng),
            b: Tensor::zeros(&[3 * hidden]),
        }
    }

    pub fn from_params(w: Tensor, u: Tensor, b: Tensor) -> Result<Self> {
        let h = u.shape().first().copied().unwrap_or(0);
        let ok = w.shape().len() == 2
            && w.shape()[1] == 3 * h
            && u.shape() == [h, 3 * h]
            && b.shape() == [3 * h];
        if !ok {
            return Err(Error::shape(format!(
                "inconsistent GRU parameters w {:?}, u {:?}, b {:?}",
                w.shape(),
                u.shape(),
                b.shape()
            )));
        }
        Ok(Self { w, u, b })
    }

    pub fn input_size(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.u.shape()[0]
    }

    /// Runs one sequence (`steps` rows of `input_size`), writing each hidden
    /// state into `out` at `out_stride` spacing starting from `out_offset`.
    fn run(
        &self,
        xs: &[&[f64]],
        out: &mut [f64],
        out_stride: usize,
        out_offset: usize,
        reverse: bool,
    ) -> Vec<StepCache> {
        let hsz = self.hidden_size();
        let din = self.input_size();
        let w = self.w.values();
        let u = self.u.values();
        let b = self.b.values();
        let steps = xs.len();
        let mut caches = Vec::with_capacity(steps);
        let mut h = vec![0.0; hsz];
        let mut a = vec![0.0; 3 * hsz];
        let mut rh = vec![0.0; hsz];
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            let x = xs[t];
            a.copy_from_slice(b);
            for i in 0..din {
                let xv = x[i];
                if xv == 0.0 {
                    continue;
                }
                for (acc, &wv) in a.iter_mut().zip(&w[i * 3 * hsz..(i + 1) * 3 * hsz]) {
                    *acc += xv * wv;
                }
            }
            for i in 0..hsz {
                let hv = h[i];
                if hv == 0.0 {
                    continue;
                }
                let row = &u[i * 3 * hsz..(i + 1) * 3 * hsz];
                for j in 0..2 * hsz {
                    a[j] += hv * row[j];
                }
            }
            let z: Vec<f64> = a[..hsz].iter().map(|&v| sigmoid(v)).collect();
            let r: Vec<f64> = a[hsz..2 * hsz].iter().map(|&v| sigmoid(v)).collect();
            for i in 0..hsz {
                rh[i] = r[i] * h[i];
            }
            for i in 0..hsz {
                let rv = rh[i];
                if rv == 0.0 {
                    continue;
                }
                let row = &u[i * 3 * hsz + 2 * hsz..(i + 1) * 3 * hsz];
                for (acc, &uv) in a[2 * hsz..].iter_mut().zip(row) {
                    *acc += rv * uv;
                }
            }
            let c: Vec<f64> = a[2 * hsz..].iter().map(|v| v.tanh()).collect();
            let h_prev = h.clone();
            for i in 0..hsz {
                h[i] = (1.0 - z[i]) * h_prev[i] + z[i] * c[i];
            }
            let o = t * out_stride + out_offset;
            out[o..o + hsz].copy_from_slice(&h);
            caches.push(StepCache { z, r, c, h_prev });
        }
        caches
    }

    /// Backpropagation through time for one sequence. `grad_h` yields the
    /// output gradient of step `t`; input gradients are added into `grad_x`.
    fn backprop(
        &mut self,
        xs: &[&[f64]],
        caches: &[StepCache],
        grad_h: impl Fn(usize) -> Vec<f64>,
        grad_x: &mut [Vec<f64>],
        reverse: bool,
    ) {
        let hsz = self.hidden_size();
        let din = self.input_size();
        let steps = xs.len();
        let (w, gw) = self.w.values_and_grad_mut();
        let (u, gu) = self.u.values_and_grad_mut();
        let gb = self.b.grad_mut();
        let mut dh_next = vec![0.0; hsz];
        let mut da = vec![0.0; 3 * hsz];
        let mut rh = vec![0.0; hsz];
        // Walk the processing order backwards.
        for s in (0..steps).rev() {
            let t = if reverse { steps - 1 - s } else { s };
            let cache = &caches[s];
            let mut dh = grad_h(t);
            for i in 0..hsz {
                dh[i] += dh_next[i];
            }
            let mut dh_prev = vec![0.0; hsz];
            for i in 0..hsz {
                let z = cache.z[i];
                let c = cache.c[i];
                let hp = cache.h_prev[i];
                dh_prev[i] = dh[i] * (1.0 - z);
                da[i] = dh[i] * (c - hp) * z * (1.0 - z);
                da[2 * hsz + i] = dh[i] * z * (1.0 - c * c);
                rh[i] = cache.r[i] * hp;
            }
            // through (r ⊙ h_prev) U_h
            for i in 0..hsz {
                let row = &u[i * 3 * hsz + 2 * hsz..(i + 1) * 3 * hsz];
                let mut d_rh = 0.0;
                for (&uv, &dv) in row.iter().zip(&da[2 * hsz..]) {
                    d_rh += uv * dv;
                }
                let r = cache.r[i];
                let hp = cache.h_prev[i];
                da[hsz + i] = d_rh * hp * r * (1.0 - r);
                dh_prev[i] += d_rh * r;
            }
            // through h_prev U_z and h_prev U_r
            for i in 0..hsz {
                let row = &u[i * 3 * hsz..i * 3 * hsz + 2 * hsz];
                let mut acc = 0.0;
                for (&uv, &dv) in row.iter().zip(&da[..2 * hsz]) {
                    acc += uv * dv;
                }
                dh_prev[i] += acc;
            }
            for i in 0..hsz {
                let hp = cache.h_prev[i];
                let grow = &mut gu[i * 3 * hsz..(i + 1) * 3 * hsz];
                if hp != 0.0 {
                    for j in 0..2 * hsz {
                        grow[j] += hp * da[j];
                    }
                }
                let rv = rh[i];
                if rv != 0.0 {
                    for j in 2 * hsz..3 * hsz {
                        grow[j] += rv * da[j];
                    }
                }
            }
            for (g, &d) in gb.iter_mut().zip(&da) {
                *g += d;
            }
            let x = xs[t];
            let gx = &mut grad_x[t];
            for i in 0..din {
                let wr = &w[i * 3 * hsz..(i + 1) * 3 * hsz];
                let mut acc = 0.0;
                for (&wv, &dv) in wr.iter().zip(&da) {
                    acc += wv * dv;
                }
                gx[i] += acc;
                let xv = x[i];
                if xv != 0.0 {
                    for (g, &dv) in gw[i * 3 * hsz..(i + 1) * 3 * hsz].iter_mut().zip(&da) {
                        *g += xv * dv;
                    }
                }
            }
            dh_next = dh_prev;
        }
    }
}

/// Bidirectional GRU over `[batch, time, input]`, producing
/// `[batch, time, 2·hidden]` as `[forward h_t ; backward h_t]`. Both
/// directions start from a zero state.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
    cache: Option<BiGruCache>,
}

#[derive(Clone, Debug)]
struct BiGruCache {
    input: Array,
    fwd: Vec<Vec<StepCache>>,
    bwd: Vec<Vec<StepCache>>,
}

impl BiGru {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let forward = GruCell::new(input, hidden, rng);
        let backward = GruCell::new(input, hidden, rng);
        Self {
            forward,
            backward,
            cache: None,
        }
    }

    pub fn from_cells(forward: GruCell, backward: GruCell) -> Result<Self> {
        if forward.input_size() != backward.input_size()
            || forward.hidden_size() != backward.hidden_size()
        {
            return Err(Error::shape("GRU directions have different sizes"));
        }
        Ok(Self {
            forward,
            backward,
            cache: None,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.forward.hidden_size()
    }

    fn dims(&self, input: &Array) -> Result<(usize, usize)> {
        let s = input.shape();
        if s.len() != 3 || s[2] != self.forward.input_size() {
            return Err(Error::shape(format!(
                "bigru expects [batch, time, {}], got {s:?}",
                self.forward.input_size()
            )));
        }
        Ok((s[0], s[1]))
    }
}

impl Layer for BiGru {
    fn forward(&mut self, input: &Array, _mode: Mode) -> Result<Array> {
        let (batch, time) = self.dims(input)?;
        let din = self.forward.input_size();
        let hsz = self.hidden_size();
        let mut out = Array::zeros(&[batch, time, 2 * hsz]);
        let mut fwd = Vec::with_capacity(batch);
        let mut bwd = Vec::with_capacity(batch);
        for b in 0..batch {
            let seq = &input.data()[b * time * din..(b + 1) * time * din];
            let xs: Vec<&[f64]> = seq.chunks_exact(din).collect();
            let o = &mut out.data_mut()[b * time * 2 * hsz..(b + 1) * time * 2 * hsz];
            fwd.push(self.forward.run(&xs, o, 2 * hsz, 0, false));
            bwd.push(self.backward.run(&xs, o, 2 * hsz, hsz, true));
        }
        self.cache = Some(BiGruCache {
            input: input.clone(),
            fwd,
            bwd,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Array) -> Result<Array> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("bigru backward called before forward"))?;
        let (batch, time) = self.dims(&cache.input)?;
        let din = self.forward.input_size();
        let hsz = self.hidden_size();
        grad_output.expect_shape(&[batch, time, 2 * hsz], "bigru grad")?;
        let mut grad_in = Array::zeros(cache.input.shape());
        for b in 0..batch {
            let seq = &cache.input.data()[b * time * din..(b + 1) * time * din];
            let xs: Vec<&[f64]> = seq.chunks_exact(din).collect();
            let g = &grad_output.data()[b * time * 2 * hsz..(b + 1) * time * 2 * hsz];
            let mut gx = vec![vec![0.0; din]; time];
            self.forward.backprop(
                &xs,
                &cache.fwd[b],
                |t| g[t * 2 * hsz..t * 2 * hsz + hsz].to_vec(),
                &mut gx,
                false,
            );
            self.backward.backprop(
                &xs,
                &cache.bwd[b],
                |t| g[t * 2 * hsz + hsz..(t + 1) * 2 * hsz].to_vec(),
                &mut gx,
                true,
            );
            let dst = &mut grad_in.data_mut()[b * time * din..(b + 1) * time * din];
            for (row, src) in dst.chunks_exact_mut(din).zip(&gx) {
                row.copy_from_slice(src);
            }
        }
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.forward.w,
            &self.forward.u,
            &self.forward.b,
            &self.backward.w,
            &self.backward.u,
            &self.backward.b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.forward.w,
            &mut self.forward.u,
            &mut self.forward.b,
            &mut self.backward.w,
            &mut self.backward.u,
            &mut self.backward.b,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_gru(din: usize, h: usize) -> BiGru {
        let cell = || {
            GruCell::from_params(
                Tensor::zeros(&[din, 3 * h]),
                Tensor::zeros(&[h, 3 * h]),
                Tensor::zeros(&[3 * h]),
            )
            .unwrap()
        };
        BiGru::from_cells(cell(), cell()).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut gru = zero_gru(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array::random_uniform(&[2, 6, 3], -1.0, 1.0, &mut rng);
        let y = gru.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y.shape(), &[2, 6, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_is_two_independent_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut gru = BiGru::new(3, 2, &mut rng);
        let x = Array::random_uniform(&[1, 1, 3], -1.0, 1.0, &mut rng);
        let y = gru.forward(&x, Mode::Infer).unwrap();
        // With h_prev = 0: h = z ⊙ tanh(x W_h + b_h), z = σ(x W_z + b_z).
        for (dir, cell) in [&gru.forward, &gru.backward].into_iter().enumerate() {
            for j in 0..2 {
                let col = |k: usize| {
                    (0..3).map(|i| x.data()[i] * cell.w.values()[i * 6 + k]).sum::<f64>()
                        + cell.b.values()[k]
                };
                let expected = sigmoid(col(j)) * col(4 + j).tanh();
                assert!((y.data()[dir * 2 + j] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn time_dimension_preserved() {
        let mut gru = BiGru::new(2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        for t in [1, 2, 9] {
            let y = gru.forward(&Array::zeros(&[1, t, 2]), Mode::Infer).unwrap();
            assert_eq!(y.shape(), &[1, t, 6]);
        }
    }

    #[test]
    fn backward_direction_reads_future() {
        let mut gru = BiGru::new(1, 2, &mut ChaCha8Rng::seed_from_u64(5));
        let mut x = Array::zeros(&[1, 4, 1]);
        let base = gru.forward(&x, Mode::Infer).unwrap();
        x.data_mut()[3] = 1.0;
        let bumped = gru.forward(&x, Mode::Infer).unwrap();
        // forward half at t=0 cannot see t=3; backward half can
        assert_eq!(base.data()[0..2], bumped.data()[0..2]);
        assert_ne!(base.data()[2..4], bumped.data()[2..4]);
    }
}
