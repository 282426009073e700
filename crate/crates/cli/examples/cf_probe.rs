// Scratch calibration driver for the coarse/fine probe gap.
// Usage: cf_probe <lexicon> <fine_per> <lr> <epochs> <fine_n> <lambda> <types>

use ewcseq_cli::commands::run_single;
use ewcseq_cli::config::{resolve, Arm, DataSection, ExperimentConfig, ModelSection, TrainSection};
use ewcseq_core::ewc::{EwcConfig, EwcMode};
use ewcseq_core::synth::SynthSpec;
use ewcseq_core::training::{head_probe, Optimizer, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lexicon: usize = args[1].parse().unwrap();
    let fine_per: usize = args[2].parse().unwrap();
    let lr: f64 = args[3].parse().unwrap();
    let epochs: usize = args[4].parse().unwrap();
    let fine_n: usize = args[5].parse().unwrap();
    let lambda: f64 = args[6].parse().unwrap();
    let n_types: usize = args[7].parse().unwrap();

    let types: Vec<String> = ["per", "loc", "org", "misc", "art", "event", "prod", "bldg"]
        [..n_types]
        .iter()
        .map(|s| s.to_string())
        .collect();

    let config = ExperimentConfig {
        model: ModelSection {
            embed_dim: 32,
            window: 2,
            hidden_dim: 64,
            min_count: Some(1),
        },
        train: TrainSection {
            learning_rate: lr,
            epochs,
            batch_size: 8,
            optimizer: Optimizer::Sgd,
        },
        ewc: EwcConfig {
            lambda,
            mode: EwcMode::SharedOnly,
            fisher_sample_cap: 1000,
        },
        data: DataSection::SynthCoarseFine {
            spec: SynthSpec {
                seed: 20240602,
                n_train: fine_n,
                n_dev: 100,
                n_test: 500,
                sentence_len: (5, 15),
                entity_types: types,
                lexicon_size: lexicon,
                vocab_overlap: 0.2,
                entity_density: 0.25,
            },
            fine_per_coarse: fine_per,
        },
        arms: vec![Arm::Ewc, Arm::Naive],
        seeds: vec![11, 22, 33],
        output_dir: "/tmp/cf_probe".into(),
    };
    let seeds = config.seeds.clone();
    let probe_base = TrainConfig {
        learning_rate: config.train.learning_rate,
        epochs: 1,
        batch_size: config.train.batch_size,
        seed: 0,
        optimizer: config.train.optimizer,
    };
    let resolved = resolve(config).unwrap();

    let mut ewc_sum = 0.0;
    let mut naive_sum = 0.0;
    for &seed in &seeds {
        let probe_cfg = TrainConfig { seed, ..probe_base.clone() };
        let coarse = &resolved.tasks[0];
        let e = run_single(&resolved, Arm::Ewc, seed).unwrap();
        let (_, er) = head_probe(e.model, coarse, 0.1, &probe_cfg).unwrap();
        let n = run_single(&resolved, Arm::Naive, seed).unwrap();
        let (_, nr) = head_probe(n.model, coarse, 0.1, &probe_cfg).unwrap();
        println!(
            "  seed {seed}: ewc {:.4} naive {:.4} gap {:+.4}",
            er.avg_micro_f1,
            nr.avg_micro_f1,
            er.avg_micro_f1 - nr.avg_micro_f1
        );
        ewc_sum += er.avg_micro_f1;
        naive_sum += nr.avg_micro_f1;
    }
    let k = seeds.len() as f64;
    println!(
        "MEAN lex={lexicon} fp={fine_per} lr={lr} ep={epochs} n={fine_n} lam={lambda} types={n_types}: ewc {:.4} naive {:.4} gap {:+.4}",
        ewc_sum / k,
        naive_sum / k,
        (ewc_sum - naive_sum) / k
    );
}
