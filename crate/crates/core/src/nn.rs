//! Small fully connected networks with hand-written backpropagation.
//!
//! Checkpoint layout (little endian):
//! `b"CISACNN\0"`, `u32` version, `u32` net count, `u32` extra count, then per
//! net `u32` output kind and `u32` layer count followed by the `u32` widths,
//! then the extra `f64` values, then per net and layer the weight matrix
//! (`in × out`, row-major) and the bias, all `f64`.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{CisacError, Result};

const MAGIC: &[u8; 8] = b"CISACNN\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    Linear,
    Tanh,
}

/// Affine layer `x·W + b` with `W` of shape `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Tanh hidden layers and a linear or tanh output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output: Output,
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer, then the network output.
    acts: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("tape holds at least the input")
    }
}

/// Parameter gradients, one `(dW, db)` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.iter().map(|x| x * x).sum::<f64>() + b.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(w, b)| w.iter().chain(b.iter()).all(|x| x.is_finite()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

impl Mlp {
    /// `widths` lists input, hidden and output sizes. Hidden layers start
    /// uniform in `±1/√fan_in`, the last layer in `±3·10⁻³`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], output: Output, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(CisacError::Usage(format!("bad layer widths {widths:?}")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, io)| {
                let bound = if l == last { 3e-3 } else { 1.0 / (io[0] as f64).sqrt() };
                Dense {
                    w: Array2::from_shape_fn((io[0], io[1]), |_| rng.random_range(-bound..=bound)),
                    b: Array1::from_shape_fn(io[1], |_| rng.random_range(-bound..=bound)),
                }
            })
            .collect();
        Ok(Mlp { layers, output })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].w.nrows()];
        w.extend(self.layers.iter().map(|l| l.w.ncols()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.ncols())
    }

    fn activates(&self, l: usize) -> bool {
        l + 1 < self.layers.len() || self.output == Output::Tanh
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(CisacError::Usage(format!("network expects {} inputs, got {}", self.input_dim(), x.ncols())));
        }
        Ok(())
    }

    /// Rows of `x` are samples.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut a = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            a = a.dot(&layer.w) + &layer.b;
            if self.activates(l) {
                a.mapv_inplace(f64::tanh);
            }
        }
        Ok(a)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector shape");
        Ok(self.forward(&x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_tape(&self, x: &Array2<f64>) -> Result<Tape> {
        self.check_input(x)?;
        let mut acts = vec![x.clone()];
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = acts[l].dot(&layer.w) + &layer.b;
            if self.activates(l) {
                a.mapv_inplace(f64::tanh);
            }
            acts.push(a);
        }
        Ok(Tape { acts })
    }

    /// Gradients of `Σ grad_out ⊙ output` with respect to the parameters and
    /// to the input.
    pub fn backward(&self, tape: &Tape, grad_out: &Array2<f64>) -> (Gradients, Array2<f64>) {
        let mut delta = grad_out.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            if self.activates(l) {
                delta.zip_mut_with(&tape.acts[l + 1], |d, a| *d *= 1.0 - a * a);
            }
            let dw = tape.acts[l].t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            grads.push((dw, db));
            delta = delta.dot(&self.layers[l].w.t());
        }
        grads.reverse();
        (Gradients { layers: grads }, delta)
    }

    /// Descent step `θ −= lr·g`, with `g` rescaled to norm `clip` when
    /// longer. Returns the unclipped norm.
    pub fn apply(&mut self, grads: &Gradients, lr: f64, clip: Option<f64>) -> Result<f64> {
        if grads.layers.len() != self.layers.len() {
            return Err(CisacError::Usage("gradient does not match network".into()));
        }
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(CisacError::Training("non-finite gradient".into()));
        }
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (layer, (dw, db)) in self.layers.iter_mut().zip(&grads.layers) {
            layer.w.scaled_add(-lr * scale, dw);
            layer.b.scaled_add(-lr * scale, db);
        }
        Ok(norm)
    }

    /// `self ← τ·online + (1−τ)·self`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        if self.widths() != online.widths() || self.output != online.output {
            return Err(CisacError::Usage("soft update between different shapes".into()));
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            t.w.zip_mut_with(&o.w, |a, &b| *a = tau * b + (1.0 - tau) * *a);
            t.b.zip_mut_with(&o.b, |a, &b| *a = tau * b + (1.0 - tau) * *a);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|x| x.is_finite()))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(CisacError::Usage(format!("expected {} parameters, got {}", self.param_count(), values.len())));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|p| *p = it.next().expect("length checked"));
        }
        Ok(())
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Write networks and extra scalars in the flat checkpoint format.
pub fn write_checkpoint<W: Write>(out: &mut W, nets: &[&Mlp], extra: &[f64]) -> Result<()> {
    out.write_all(MAGIC)?;
    put_u32(out, VERSION)?;
    put_u32(out, nets.len() as u32)?;
    put_u32(out, extra.len() as u32)?;
    for net in nets {
        put_u32(out, if net.output == Output::Tanh { 1 } else { 0 })?;
        put_u32(out, net.layers.len() as u32)?;
        for w in net.widths() {
            put_u32(out, w as u32)?;
        }
    }
    for v in extra {
        out.write_all(&v.to_le_bytes())?;
    }
    for net in nets {
        for v in net.to_flat() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(Vec<Mlp>, Vec<f64>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CisacError::Checkpoint("not a network checkpoint".into()));
    }
    let version = get_u32(input)?;
    if version != VERSION {
        return Err(CisacError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = get_u32(input)? as usize;
    let extras = get_u32(input)? as usize;
    let mut nets = Vec::with_capacity(count);
    for _ in 0..count {
        let output = match get_u32(input)? {
            0 => Output::Linear,
            1 => Output::Tanh,
            k => return Err(CisacError::Checkpoint(format!("unknown output kind {k}"))),
        };
        let layers = get_u32(input)? as usize;
        if layers == 0 || layers > 64 {
            return Err(CisacError::Checkpoint(format!("implausible layer count {layers}")));
        }
        let widths = (0..=layers).map(|_| get_u32(input).map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        if widths.contains(&0) {
            return Err(CisacError::Checkpoint("zero layer width".into()));
        }
        let layers = widths
            .windows(2)
            .map(|io| Dense { w: Array2::zeros((io[0], io[1])), b: Array1::zeros(io[1]) })
            .collect();
        nets.push(Mlp { layers, output });
    }
    let extra = (0..extras).map(|_| get_f64(input)).collect::<Result<Vec<_>>>()?;
    for net in &mut nets {
        let values = (0..net.param_count()).map(|_| get_f64(input)).collect::<Result<Vec<_>>>()?;
        net.set_flat(&values)?;
    }
    Ok((nets, extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_input(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Scalar objective `Σ c ⊙ f(x)` for fixed random weights `c`.
    fn objective(net: &Mlp, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
        (net.forward(x).unwrap() * c).sum()
    }

    #[test]
    fn parameter_and_input_gradients_match_differences() {
        let mut r = rng();
        for output in [Output::Linear, Output::Tanh] {
            let mut net = Mlp::new(&[3, 5, 4, 2], output, &mut r).unwrap();
            // Larger last layer so the output nonlinearity matters.
            net.layers[2].w.mapv_inplace(|v| v * 300.0);
            let x = random_input(4, 3, &mut r);
            let c = random_input(4, 2, &mut r);
            let tape = net.forward_tape(&x).unwrap();
            let (g, gx) = net.backward(&tape, &c);
            let flat = net.to_flat();
            let analytic = g.to_flat();
            let h = 1e-6;
            for (i, &a) in analytic.iter().enumerate() {
                let mut p = flat.clone();
                p[i] += h;
                let mut plus = net.clone();
                plus.set_flat(&p).unwrap();
                p[i] -= 2.0 * h;
                let mut minus = net.clone();
                minus.set_flat(&p).unwrap();
                let fd = (objective(&plus, &x, &c) - objective(&minus, &x, &c)) / (2.0 * h);
                assert!((fd - a).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {a}");
            }
            for ((i, j), &a) in gx.indexed_iter() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (objective(&net, &xp, &c) - objective(&net, &xm, &c)) / (2.0 * h);
                assert!((fd - a).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn clipped_step_has_bounded_length() {
        let mut r = rng();
        let mut net = Mlp::new(&[2, 3, 1], Output::Linear, &mut r).unwrap();
        let before = net.to_flat();
        let x = random_input(8, 2, &mut r);
        let tape = net.forward_tape(&x).unwrap();
        let (g, _) = net.backward(&tape, &Array2::from_elem((8, 1), 100.0));
        let norm = net.apply(&g, 0.5, Some(1.0)).unwrap();
        assert!(norm > 1.0);
        let moved: f64 = net.to_flat().iter().zip(&before).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((moved - 0.5).abs() < 1e-12);
    }

    #[test]
    fn soft_update_limits() {
        let mut r = rng();
        let online = Mlp::new(&[2, 3, 1], Output::Linear, &mut r).unwrap();
        let mut target = Mlp::new(&[2, 3, 1], Output::Linear, &mut r).unwrap();
        let orig = target.clone();
        target.soft_update_from(&online, 0.0).unwrap();
        assert_eq!(target, orig);
        target.soft_update_from(&online, 1.0).unwrap();
        assert_eq!(target, online);
        let other = Mlp::new(&[2, 4, 1], Output::Linear, &mut r).unwrap();
        assert!(target.soft_update_from(&other, 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng();
        let a = Mlp::new(&[3, 4, 2], Output::Tanh, &mut r).unwrap();
        let b = Mlp::new(&[5, 2, 2, 1], Output::Linear, &mut r).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[&a, &b], &[0.25]).unwrap();
        let (nets, extra) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(nets, vec![a, b]);
        assert_eq!(extra, vec![0.25]);
        buf[0] = b'X';
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut r = rng();
        assert!(Mlp::new(&[3], Output::Linear, &mut r).is_err());
        assert!(Mlp::new(&[3, 0, 1], Output::Linear, &mut r).is_err());
        let net = Mlp::new(&[3, 2], Output::Linear, &mut r).unwrap();
        assert!(net.forward(&Array2::zeros((1, 4))).is_err());
    }
}
