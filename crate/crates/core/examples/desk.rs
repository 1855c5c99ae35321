//! Desk-scale ablation: settings A–D on the synthetic texture dataset with the
//! `small` encoder. Knobs come from environment variables, e.g.
//! `SEEDS=0,1,2 SETTINGS=AD cargo run --release --example desk`.

use std::time::Instant;

use mlcl::encoders::EncoderConfig;
use mlcl::experiment::{run_setting, EvalConfig};
use mlcl::fewshot::RelationTrainConfig;
use mlcl::mlcl::{ContrastiveConfig, Reduction};
use mlcl::augment::AugmentConfig;
use mlcl::pretrain::PretrainConfig;
use mlcl::synthetic::{generate, SyntheticConfig};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() -> mlcl::Result<()> {
    env_logger::init();
    let seeds: Vec<u64> = std::env::var("SEEDS")
        .unwrap_or_else(|_| "0".into())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    let settings: String = env("SETTINGS", "ABCD".to_string());
    let enc = EncoderConfig::preset("small")?;
    let top = enc.tap_count();
    for seed in seeds {
        let syn = SyntheticConfig {
            train_classes: env("TRAIN_CLASSES", 10),
            test_classes: env("TEST_CLASSES", 16),
            images_per_class: env("IMAGES", 150),
            colour_variation: env("COLOUR_VAR", 0.3),
            seed: env("DATA_SEED", 0u64) + seed,
            ..Default::default()
        };
        let ds = generate(&syn)?;
        for s in settings.chars() {
            let levels: Vec<usize> = match s {
                'A' => vec![],
                'B' => vec![top],
                'C' => vec![top - 2, top],
                _ => vec![top - 4, top - 2, top],
            };
            let pcfg = PretrainConfig {
                epochs: env("EPOCHS", 16),
                batch_size: env("BATCH", 64),
                initial_lr: env("LR", 0.05),
                mlcl_weight: env("MLCL_WEIGHT", 0.5),
                augment: AugmentConfig {
                    crop_scale_range: (env("CROP_MIN", 0.5), 1.0),
                    color_distortion_strength: env("COLOR", 0.5),
                    blur_probability: env("BLUR", 0.2),
                    grayscale_probability: env("GRAY", 0.2),
                    ..AugmentConfig::default()
                },
                contrastive: ContrastiveConfig {
                    temperature: env("TAU", 0.5),
                    reduction: if env("MEAN", true) { Reduction::Mean } else { Reduction::Sum },
                    // LEVEL_NORM=true weights each level 1/|levels|
                    level_weights: if env("LEVEL_NORM", false) {
                        vec![1.0 / levels.len() as f64; levels.len()]
                    } else {
                        Vec::new()
                    },
                    ..ContrastiveConfig::with_levels(&levels)
                },
                seed,
                ..Default::default()
            };
            let rcfg = RelationTrainConfig {
                episodes: env("REL_EPISODES", 300),
                lr: env("REL_LR", 0.05),
                hidden: env("HIDDEN", 16),
                queries: env("REL_QUERIES", 10),
                seed,
                ..Default::default()
            };
            let ecfg = EvalConfig {
                episodes: env("EVAL_EPISODES", 150),
                seed: 1000 + seed,
                ..Default::default()
            };
            let t0 = Instant::now();
            let taps = [top - 2, top - 1, top];
            let (out, _) = run_setting::<f32>(&ds, &enc, &pcfg, &rcfg, &ecfg, env("SHOT", 1), &taps)?;
            let per: Vec<String> = out.per_tap.iter().map(|(t, r)| format!("{t}:{:.2}", r.mean_accuracy)).collect();
            println!(
                "seed {seed} setting {s} [{}] ens {:.2}  losses {:?}  ({:.0}s)",
                per.join(" "),
                out.ensemble.mean_accuracy,
                out.final_losses,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
