//! Finite-difference checks: a small expression over free inputs, then the
//! full SA+Contrast captioning loss of a tiny model.

use groupcap::autograd::{grad_check, grad_check_inputs, Graph};
use groupcap::datagen::{generate_corpus, GenConfig};
use groupcap::model::{Model, ModelConfig};
use groupcap::Matrix;

fn main() -> groupcap::Result<()> {
    let a = Matrix::from_rows(&[[0.3, -1.2, 0.5], [0.9, 0.1, -0.4]])?;
    let b = Matrix::from_rows(&[[0.7, 0.2], [-0.5, 1.1], [0.25, -0.8]])?;
    let err = grad_check_inputs(&[a, b], |g, x| {
        let y = g.matmul(x[0], x[1])?;
        let s = g.row_softmax(y, None)?;
        let t = g.tanh(s);
        Ok(g.sum(t))
    })?;
    println!("sum(tanh(softmax(A·B)))   worst relative error {err:.2e}");

    let corpus = generate_corpus(&GenConfig {
        d: 8,
        n_samples: 24,
        n_t: 3,
        n_r: 4,
        ..GenConfig::default()
    })?;
    let mut model = Model::build(ModelConfig {
        d_ff: 16,
        h: 6,
        e: 5,
        n_t: 3,
        n_r: 4,
        ..ModelConfig::new(corpus.vocab.clone(), 8)
    })?;
    let batch = [&corpus.samples[0], &corpus.samples[1]];
    let mut store = std::mem::take(&mut model.store);
    let err = grad_check(&mut store, |g: &mut Graph, s| {
        let m = Model {
            store: s.clone(),
            ..model.clone()
        };
        m.batch_loss(g, &batch)
    })?;
    println!("SA+Contrast batch loss      worst relative error {err:.2e} over {} parameters", store.num_scalars());
    Ok(())
}
