//! Differentiate a small convolutional loss and verify the gradients
//! against central finite differences.
//!
//!     cargo run --example autodiff_gradcheck

use nodule_cad::tensor::{DiffGraph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let image = Tensor::uniform(&[2, 9, 9], 1.0, &mut rng);
    let kernels = Tensor::uniform(&[3, 2, 3, 3], 0.5, &mut rng);
    let weights = Tensor::uniform(&[3, 2, 2], 1.0, &mut rng);

    // loss = sum(w * maxpool(relu(conv(x, k))))
    let build = |g: &mut DiffGraph, x: Var, k: Var, w: Tensor| {
        let y = g.conv2d(x, k, 2, 1).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.max_pool(y, &[2, 2], &[2, 2]).unwrap();
        g.dot_const(y, w).unwrap()
    };

    let mut graph = DiffGraph::training();
    let x = graph.leaf(&image.clone().with_grad());
    let k = graph.leaf(&kernels.clone().with_grad());
    let loss = build(&mut graph, x, k, weights.clone());
    println!("loss = {:.6}", graph.value(loss).item());
    let grads = graph.backward(loss).unwrap();

    let eval = |img: &Tensor, ker: &Tensor| {
        let mut g = DiffGraph::inference();
        let x = g.leaf(img);
        let k = g.leaf(ker);
        let loss = build(&mut g, x, k, weights.clone());
        g.value(loss).item()
    };

    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for (target, name) in [(x, "image"), (k, "kernels")] {
        let analytic = grads.get(target).unwrap().clone();
        let mut im = image.clone();
        let mut ke = kernels.clone();
        for i in 0..analytic.len() {
            let slot = if name == "image" {
                &mut im
            } else {
                &mut ke
            };
            let orig = slot.data()[i];
            slot.data_mut()[i] = orig + step;
            let fp = eval(&im, &ke);
            let slot = if name == "image" {
                &mut im
            } else {
                &mut ke
            };
            slot.data_mut()[i] = orig - step;
            let fm = eval(&im, &ke);
            let slot = if name == "image" {
                &mut im
            } else {
                &mut ke
            };
            slot.data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let g = analytic.data()[i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        println!("{name}: checked {} coordinates", analytic.len());
    }
    println!("worst relative error vs finite differences: {worst:.3e}");
    assert!(worst < 1e-5);
    println!("gradients agree");
}
