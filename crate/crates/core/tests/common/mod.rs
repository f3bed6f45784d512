#![allow(dead_code)]

use embedit_core::optim::Objective;
use embedit_core::{Generator, GeneratorConfig, NoiseBank, StyleCode, Vgg16Features, VggConfig};

pub fn tiny_generator(resolution: usize) -> Generator {
    Generator::init_toy(GeneratorConfig::toy(resolution).with_style_dim(8).with_seed(3)).unwrap()
}

pub fn toy_vgg() -> Vgg16Features {
    Vgg16Features::init_random(VggConfig::toy())
}

/// A variable of the objective: a style entry or a noise entry.
#[derive(Debug, Clone, Copy)]
pub enum Entry {
    W(usize),
    N(usize, usize),
}

pub fn perturbed(w: &StyleCode, n: &NoiseBank, e: Entry, delta: f64) -> (StyleCode, NoiseBank) {
    let (mut w, mut n) = (w.clone(), n.clone());
    match e {
        Entry::W(i) => w.values_mut()[i] += delta,
        Entry::N(m, i) => n.maps_mut()[m].data[i] += delta,
    }
    (w, n)
}

pub fn central_difference(obj: &dyn Objective, w: &StyleCode, n: &NoiseBank, e: Entry, h: f64) -> f64 {
    let (wp, np) = perturbed(w, n, e, h);
    let (wm, nm) = perturbed(w, n, e, -h);
    (obj.evaluate(&wp, &np).unwrap().loss - obj.evaluate(&wm, &nm).unwrap().loss) / (2.0 * h)
}

/// Ten style entries and ten noise entries spread across layers.
pub fn sampled_entries(w: &StyleCode, n: &NoiseBank) -> Vec<Entry> {
    let total = w.values().len();
    let mut out: Vec<Entry> = (0..10).map(|k| Entry::W((k * 7919 + 13) % total)).collect();
    for k in 0..10 {
        let m = k % n.len();
        let len = n.maps()[m].data.len();
        out.push(Entry::N(m, (k * 104_729 + 5) % len));
    }
    out
}
