// Scratch benchmark for tuning the shift cohort; not part of the CLI surface.
use std::time::Instant;

use dygr::baselines::{ablation_config, AblationKind};
use dygr::cohort::environment_holdout_split;
use dygr::metrics;
use dygr::model::{forward, ModelConfig, ParamSet};
use dygr::preprocess::build_dynamic_graph;
use dygr::synth::{generate_cohort, GeneratorConfig};
use dygr::train::{best_sweep_entry, sweep_lambda, train, TrainConfig};

fn test_mae(graph: &dygr::preprocess::DynamicGraph, params: &ParamSet, cfg: &ModelConfig) -> f64 {
    let fwd = forward(graph, params, cfg).unwrap();
    let preds = fwd.predictions();
    let labels = fwd.labels();
    let mask = vec![true; preds.len()];
    metrics::mae(&preds, &labels, &mask).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.5);
    let gamma: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let vnoise: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let wiggle: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.4);
    let n_seeds: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(5);

    let mut gen_cfg = GeneratorConfig::standard(60, 12, &[2.0, -1.0, -2.0], 7);
    gen_cfg.noise_sigma = noise;
    gen_cfg.neighbor_strength = gamma;
    gen_cfg.variant_noise = vnoise;
    gen_cfg.within_patient_wiggle = wiggle;
    println!(
        "generator: noise={noise} gamma={gamma} vnoise={vnoise} wiggle={wiggle} seeds={n_seeds}"
    );

    let (table, _) = generate_cohort(&gen_cfg).unwrap();
    let split =
        environment_holdout_split(&table, &["e0".into(), "e1".into()], "e2", 0.75).unwrap();
    println!(
        "split: train {} val {} test {} patients",
        split.train.patients().len(),
        split.val.patients().len(),
        split.test.patients().len()
    );
    let (train_g, val_g, test_g) = build_dynamic_graph(&split, 10).unwrap();

    let start = Instant::now();
    let mut full_maes = Vec::new();
    let mut erm_maes = Vec::new();
    let mut ent_maes = Vec::new();
    for seed in 0..n_seeds {
        let model_cfg = ModelConfig {
            seed,
            ..Default::default()
        };
        let train_cfg = TrainConfig {
            seed,
            ..Default::default()
        };

        let t0 = Instant::now();
        let entries =
            sweep_lambda(&train_g, &val_g, &model_cfg, &train_cfg, &[0.1, 1.0, 10.0]).unwrap();
        let best = best_sweep_entry(&entries);
        let full = test_mae(&test_g, &entries[best].params, &model_cfg);
        let lambdas_val: Vec<(f64, f64, usize)> = entries
            .iter()
            .map(|e| (e.lambda, e.best_val_mae, e.history.epochs.len()))
            .collect();

        let (erm_model, erm_train) = ablation_config(AblationKind::Erm, &model_cfg, &train_cfg);
        let (erm_params, erm_hist) = train(&train_g, &val_g, &erm_model, &erm_train).unwrap();
        let erm = test_mae(&test_g, &erm_params, &erm_model);

        let (ent_model, ent_train) =
            ablation_config(AblationKind::Entangled, &model_cfg, &train_cfg);
        let (ent_params, _) = train(&train_g, &val_g, &ent_model, &ent_train).unwrap();
        let ent = test_mae(&test_g, &ent_params, &ent_model);

        println!(
            "seed {seed}: full {full:.4} (lambda {} of {lambdas_val:?}) erm {erm:.4} ({} epochs) ent {ent:.4}  [{:?}]",
            entries[best].lambda,
            erm_hist.epochs.len(),
            t0.elapsed()
        );
        full_maes.push(full);
        erm_maes.push(erm);
        ent_maes.push(ent);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fm = mean(&full_maes);
    let em = mean(&erm_maes);
    let nm = mean(&ent_maes);
    println!("means: full {fm:.4} erm {em:.4} ent {nm:.4}");
    println!(
        "full vs erm: {:.2}% lower (need >= 5); ent >= full: {}",
        100.0 * (em - fm) / em,
        nm >= fm
    );
    println!("total {:?}", start.elapsed());
}
