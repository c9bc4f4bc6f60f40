use phoenix::numeric::{Graph, NamedTensors, ParamTable, Tensor};
use phoenix::federation::LocalObjective;
use phoenix::Result;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Least squares `mean((x·w + b − y)²)` over a fixed design matrix.
pub struct Regression {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub d: usize,
    pub o: usize,
}

impl Regression {
    pub fn random(n: usize, d: usize, o: usize, seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Regression {
            x: (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect(),
            y: (0..n * o).map(|_| r.random_range(-1.0..1.0)).collect(),
            d,
            o,
        }
    }

    fn rows(&self, v: &[f64], width: usize, batch: &[usize]) -> Tensor {
        let data = batch
            .iter()
            .flat_map(|&i| v[i * width..(i + 1) * width].iter().map(|&a| a as f32))
            .collect();
        Tensor::new(vec![batch.len(), width], data).unwrap()
    }

    pub fn init(&self, seed: u64) -> ParamTable {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut t = ParamTable::new();
        let w = (0..self.d * self.o).map(|_| r.random_range(-0.5..0.5)).collect();
        let b = (0..self.o).map(|_| r.random_range(-0.5..0.5)).collect();
        t.insert("w", Tensor::new(vec![self.d, self.o], w).unwrap(), false).unwrap();
        t.insert("b", Tensor::new(vec![self.o], b).unwrap(), false).unwrap();
        t
    }

    /// Hand-derived gradient of the mean over `batch`, in f64.
    pub fn gradient(&self, w: &[f64], b: &[f64], batch: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let (d, o) = (self.d, self.o);
        let scale = 2.0 / (batch.len() * o) as f64;
        let mut gw = vec![0.0; d * o];
        let mut gb = vec![0.0; o];
        for &i in batch {
            for j in 0..o {
                let pred: f64 = (0..d).map(|k| self.x[i * d + k] * w[k * o + j]).sum::<f64>() + b[j];
                let r = scale * (pred - self.y[i * o + j]);
                gb[j] += r;
                for k in 0..d {
                    gw[k * o + j] += r * self.x[i * d + k];
                }
            }
        }
        (gw, gb)
    }
}

impl LocalObjective for Regression {
    fn loss_and_grad(&self, params: &ParamTable, batch: &[usize], _: u64, _: u64) -> Result<(f32, NamedTensors)> {
        let mut g = Graph::new();
        let x = g.constant(self.rows(&self.x, self.d, batch));
        let y = g.constant(self.rows(&self.y, self.o, batch));
        let w = g.param("w");
        let b = g.param("b");
        let xw = g.matmul(x, w);
        let pred = g.add_row_bias(xw, b);
        let loss = g.mse(pred, y);
        g.set_output(loss);
        let l = g.forward(&[params])?.item();
        Ok((l, g.backward()?))
    }
}

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn sizes_to_lists(sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&s| {
            let v = (start..start + s).collect();
            start += s;
            v
        })
        .collect()
}

