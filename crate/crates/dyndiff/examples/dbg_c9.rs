use dyndiff::config::DataConfig;
use dyndiff::data::{make_windows, synth_generate, Stats, SynthKind};
use dyndiff::denoiser::DenoiserConfig;
use dyndiff::diffusion::ScheduleConfig;
use dyndiff::encoder::EncoderConfig;
use dyndiff::forecasting::{forecast_ensemble, train, Model, ModelConfig, TrainConfig};

fn main() {
    let frame = synth_generate(SynthKind::RegimeSwitchBimodal, 12_000, 777).unwrap();
    let (train_f, _val_f, test_f) = frame.split([0.8, 0.1, 0.1], 74).unwrap();
    let stats = train_f.fit_stats();
    let train_s = train_f.standardized(&stats).unwrap();
    let test_s = test_f.standardized(&stats).unwrap();
    let train_ws = make_windows(&train_s, 64, 10, 1).unwrap();
    let test_ws = make_windows(&test_s, 64, 10, 1).unwrap();
    let cfg = ModelConfig {
        schedule: ScheduleConfig::default(),
        encoder: EncoderConfig { in_vars: 2, channels: 16, layers: 3, kernel: 3, dilation_base: 2, latent_dim: 32 },
        denoiser: DenoiserConfig { n_vars: 1, horizon: 10, d_model: 32, heads: 4, res_blocks: 2, ff_dim: 64 },
    };
    let tc = TrainConfig { batch: 32, steps: 600, seed: 9, context: 64, horizon: 10, eval_interval: 0, ..TrainConfig::default() };
    let outcome = train(&train_ws, None, &cfg, &tc, &DataConfig::default()).unwrap();
    println!("final loss {:.4}", outcome.log.last().unwrap().loss);
    let model = Model::from_checkpoint(&outcome.checkpoint).unwrap();
    let target_stats: Vec<Stats> = vec![stats[0]];
    let mut pooled: Vec<f64> = Vec::new();
    for w in [0usize, 50, 100, 200, 400] {
        let (x, _) = test_ws.window(w).unwrap();
        let ens = forecast_ensemble(&x, &model, 100, 9000 + w as u64, 0, vec!["value".into()], &target_stats).unwrap();
        pooled.extend(ens.samples.data().iter().map(|&v| v as f64));
    }
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| pooled[((pooled.len() - 1) as f64 * p) as usize];
    println!("n={} min {:.2} q01 {:.2} q10 {:.2} q50 {:.2} q90 {:.2} q99 {:.2} max {:.2}",
        pooled.len(), q(0.0), q(0.01), q(0.10), q(0.5), q(0.90), q(0.99), q(1.0));
    let frac_outside = pooled.iter().filter(|&&v| v.abs() > 10.0).count() as f64 / pooled.len() as f64;
    println!("fraction |v| > 10: {:.4}", frac_outside);
}
