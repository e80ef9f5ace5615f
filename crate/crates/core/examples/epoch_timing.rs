//! Times one training step per slice on 512×512 slices with the default model.

use std::time::Instant;

use slicelab_core::cae::{ArchConfig, Cae, Sgd};
use slicelab_core::scalar::Scalar;

fn run<T: Scalar>() {
    let (w, h) = (512, 512);
    let mut model = Cae::<T>::new(ArchConfig::default(), 1).unwrap();
    let mut opt = Sgd::default();
    let image: Vec<T> = (0..w * h).map(|i| T::lit(((i * 7919) % 1000) as f64 / 1000.0)).collect();
    let labels: Vec<u8> = (0..w * h).map(|i| (i % 4) as u8).collect();
    let t = Instant::now();
    let (maps, _) = model.forward(&image, w, h).unwrap();
    let fwd = t.elapsed();
    let t = Instant::now();
    let (_, grads) = model.backward(&maps, &labels).unwrap();
    let bwd = t.elapsed();
    opt.step(model.params_mut(), &grads).unwrap();
    let t = Instant::now();
    for _ in 0..4 {
        let (_, g) = model.loss_and_gradients(&image, &labels, w, h).unwrap();
        opt.step(model.params_mut(), &g).unwrap();
    }
    println!("{}: forward {:?} backward {:?} four steps {:?}", T::NAME, fwd, bwd, t.elapsed());
}

fn main() {
    run::<f32>();
    run::<f64>();
}
