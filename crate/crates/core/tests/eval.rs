use vco::config::RunConfig;
use vco::data::generate;
use vco::eval::{class_mean_err, eval_classes, reference_stats, toy_fd};
use vco::teacher::SemanticPipeline;
use vco::{Rng, Tensor};

#[test]
fn real_data_scores_far_better_than_noise() {
    let rc = RunConfig::default();
    let train = generate(&rc.dataset).unwrap();
    let pipe = SemanticPipeline::fit(rc.teacher, &train).unwrap();
    let held = generate(&rc.heldout_spec()).unwrap();
    let reference = reference_stats(&pipe, &held).unwrap();

    let n = rc.eval.samples_per_class * rc.dataset.n_classes;
    let classes = eval_classes(rc.dataset.n_classes, rc.eval.samples_per_class);
    // same class layout as an evaluation batch, drawn from the training set
    let mut picked = Vec::with_capacity(n * train.spec.image_len());
    let mut next = vec![0usize; rc.dataset.n_classes];
    for &c in &classes {
        let idx = (0..train.len()).filter(|&i| train.labels[i] as usize == c).nth(next[c]).unwrap();
        next[c] += 1;
        picked.extend_from_slice(train.image(idx).data());
    }
    let shape = [n, train.spec.channels, train.spec.height, train.spec.width];
    let real = Tensor::new(&shape, picked).unwrap();
    let mut rng = Rng::new(1);
    let noise = Tensor::randn(&shape, 1.0, &mut rng);

    let fd_real = toy_fd(&pipe, &reference, &real).unwrap();
    let fd_noise = toy_fd(&pipe, &reference, &noise).unwrap();
    let cme_real = class_mean_err(&real, &classes, &held).unwrap();
    let cme_noise = class_mean_err(&noise, &classes, &held).unwrap();
    println!("real {fd_real:.4} / {cme_real:.4}, noise {fd_noise:.4} / {cme_noise:.4}");
    assert!(fd_real * 20.0 < fd_noise, "{fd_real} vs {fd_noise}");
    assert!(cme_real * 3.0 < cme_noise);
}
