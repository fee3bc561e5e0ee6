#![allow(dead_code)]

use fixformer_core::gaze::{Fixation, FixationSequence};
use fixformer_core::model::Example;
use fixformer_core::tensor::{Graph, Tensor, Var};
use fixformer_core::vit::ImageSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random valid fixation sequence of length `t`.
pub fn rand_sequence(rng: &mut ChaCha8Rng, t: usize) -> FixationSequence {
    let mut start = rng.random_range(0.0..0.2);
    let mut fx = Vec::with_capacity(t);
    for _ in 0..t {
        let duration = rng.random_range(0.05..0.6);
        fx.push(Fixation {
            start,
            duration,
            x: rng.random_range(0.0..1.0),
            y: rng.random_range(0.0..1.0),
        });
        start += duration + rng.random_range(0.01..0.1);
    }
    FixationSequence::new(fx).unwrap()
}

pub fn rand_image(rng: &mut ChaCha8Rng, size: usize) -> ImageSample {
    let data = (0..size * size).map(|_| rng.random_range(0.0..1.0)).collect();
    ImageSample::new(Tensor::new([size, size], data).unwrap()).unwrap()
}

pub struct Batch {
    pub images: Vec<ImageSample>,
    pub gaze: Vec<FixationSequence>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn random(seed: u64, lengths: &[usize], image_size: usize, n_classes: usize) -> Self {
        let mut r = rng(seed);
        let images = lengths.iter().map(|_| rand_image(&mut r, image_size)).collect();
        let gaze = lengths.iter().map(|&t| rand_sequence(&mut r, t)).collect();
        let labels = lengths.iter().map(|_| r.random_range(0..n_classes)).collect();
        Batch { images, gaze, labels }
    }

    pub fn examples(&self) -> Vec<Example<'_>> {
        self.images.iter().zip(&self.gaze).map(|(i, g)| Example::new(i, g)).collect()
    }
}

/// Max relative error between the analytic gradient of `f` and central
/// differences, over all inputs. `f` builds a scalar from its inputs.
pub fn fd_rel_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut up = inputs.to_vec();
            up[k].data_mut()[i] += h;
            let mut down = inputs.to_vec();
            down[k].data_mut()[i] -= h;
            numeric[i] = (eval(&up) - eval(&down)) / (2.0 * h);
        }
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let denom = norm(&analytic).max(norm(&numeric)).max(1e-8);
        worst = worst.max(norm(&diff) / denom);
    }
    worst
}

/// Contracts a tensor-valued op output to a scalar with fixed random weights,
/// so every output entry carries a distinct gradient.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let w = rand_tensor(&mut rng(seed ^ 0x5eed), &shape, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}
