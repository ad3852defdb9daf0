use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;
use vqround::hessian::{
    accumulate_hessian, damped_inverse_factor, hessian_aware_init, HessianConfig,
};
use vqround::io::{load_tensor, save_tensor};
use vqround::optim::{optimize_blockwise_with_base, BlockwiseProblem, FinetuneConfig};
use vqround::quant::{compute_quant_params, rtn_quantize, RoundingSpec};
use vqround::reparam::{init_codebook, ClusterSpace, Codebook};
use vqround::Tensor2D;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| rng.sample(StandardNormal)).unwrap()
}

#[test]
fn layer_pipeline_through_files() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = gaussian(32, 32, &mut rng);
    let x = gaussian(32, 128, &mut rng);
    save_tensor(&w, dir.path().join("w.vqt")).unwrap();
    save_tensor(&x, dir.path().join("x.vqt")).unwrap();
    let w = load_tensor(dir.path().join("w.vqt")).unwrap();
    let x = load_tensor(dir.path().join("x.vqt")).unwrap();

    let spec = RoundingSpec::default();
    let p = compute_quant_params(&w, 3).unwrap();
    let hcfg = HessianConfig::default();
    let factor = damped_inverse_factor(&accumulate_hessian(&x).unwrap(), &hcfg).unwrap();
    let init = hessian_aware_init(&w, &p, &factor, &hcfg).unwrap();
    let fit = init_codebook(&init.h_tilde, &spec, 8, 128, 50, 0, ClusterSpace::Latent).unwrap();

    let prefix = dir.path().join("cb");
    fit.codebook.save(&prefix).unwrap();
    let cb = Codebook::load(&prefix).unwrap();
    assert_eq!(cb, fit.codebook);

    let cfg = FinetuneConfig {
        steps: 300,
        ..Default::default()
    };
    let run = optimize_blockwise_with_base(&w, &x, &p, &init.base, &cb, &spec, &cfg).unwrap();
    assert!(run.final_loss < run.initial_loss);
    assert_eq!(run.codebook.indices(), cb.indices());

    let prob = BlockwiseProblem::with_base(&w, &x, &p, &init.base, &run.codebook, &spec).unwrap();
    let hard = prob.hard_output_sq_error(&run.codebook.centroids().to_f64());
    let rtn = prob.output_sq_error(&rtn_quantize(&w, &p).unwrap().1.to_f64());
    assert!(hard <= rtn, "hard {hard} vs rtn {rtn}");
}
