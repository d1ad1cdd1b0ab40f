//! Scratch calibration harness for the reduced directional experiment.
//! Run with: cargo run -p safelab --release --example calibrate [budget]

use safelab::corpus::Source;
use safelab::curriculum::make_schedule;
use safelab::decode::BeamOptions;
use safelab::eval::{run_safety_eval, EvalDecoder, RuleJudge};
use safelab::fixtures::{
    self, intervention_mixture, math_corpus, prepared_corpora, probe_documents, refusal_lexicon,
    safe_mixture, CorpusOptions,
};
use safelab::model::{LayerSelect, Model, ModelConfig};
use safelab::probe::{separability_experiment, CheckpointEntry, SeparabilityOptions};
use safelab::rng::derive_seed;
use safelab::trainer::{finetune, pretrain, PretrainOpts, TrainConfig, TrainState};
use std::collections::BTreeMap;
use std::time::Instant;

fn main() {
    let budget: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150_000);
    let tag_rate: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.10);
    let corpora = prepared_corpora(&CorpusOptions::default(), 0.5).unwrap();
    let total_docs: usize = corpora.values().map(|c| c.len()).sum();
    println!("corpus: {total_docs} docs over {} sources, budget {budget}", corpora.len());

    let fractions = [0.0, 0.2, 0.6, 1.0];
    let seeds = [0u64, 1, 2];
    let judge = RuleJudge::new(refusal_lexicon());
    let hr = fixtures::harmful_request_set();
    let hc = fixtures::harmful_completion_set();
    let safebeam = EvalDecoder::SafeBeam { n_beams: 8, drop_fraction: 0.25, max_tokens: 64 };

    // (fraction, seed) -> model
    let mut models: BTreeMap<(String, u64), Model<f32>> = BTreeMap::new();
    for &seed in &seeds {
        for &fraction in &fractions {
            let t0 = Instant::now();
            let mc = ModelConfig {
                n_layer: 2,
                n_head: 4,
                d_model: 48,
                d_ff: 128,
                context_len: 128,
                seed: derive_seed(seed, "model-init"),
                ..ModelConfig::default()
            };
            let mut model = Model::init(mc.clone()).unwrap();
            let schedule =
                make_schedule(fraction, budget, &safe_mixture(), &intervention_mixture()).unwrap();
            let tc = TrainConfig {
                batch_size: 8,
                tag_rate,
                seed: derive_seed(seed, "pretrain"),
                ..TrainConfig::default()
            };
            let mut state = TrainState::new(&mc, tc.seed);
            let mut last_loss = 0.0;
            pretrain(
                &mut model,
                &schedule,
                &corpora,
                &tc,
                &mut state,
                PretrainOpts { pause_at_step: None, checkpoint_dir: None },
                |r| last_loss = r.loss,
            )
            .unwrap();
            println!(
                "seed {seed} fraction {fraction}: {} steps, {} tokens, final loss {last_loss:.3}, {:.1}s",
                state.step,
                state.tokens_seen,
                t0.elapsed().as_secs_f32()
            );
            models.insert((format!("{fraction}"), seed), model);
        }
    }

    // (a) probe AUC per pretraining seed: fraction 0 vs 1.
    let docs = probe_documents(60, 7);
    let doc_refs: Vec<&safelab::corpus::Document> = docs.iter().collect();
    let mut a_wins = 0;
    for &seed in &seeds {
        let t0 = Instant::now();
        let entries: Vec<CheckpointEntry> = fractions
            .iter()
            .map(|f| CheckpointEntry {
                id: format!("frac{f}"),
                curriculum_fraction: *f,
                model: &models[&(format!("{f}"), seed)],
            })
            .collect();
        let opts = SeparabilityOptions {
            layers: vec![LayerSelect::Final],
            n_seeds: 3,
            train_per_class: 40,
            threshold: 0.5,
            position: None,
            base_seed: derive_seed(seed, "probe"),
        };
        let results = separability_experiment(&entries, &doc_refs, &opts).unwrap();
        let auc = |f: f64| {
            results
                .iter()
                .find(|r| (r.curriculum_fraction - f).abs() < 1e-9)
                .map(|r| r.mean)
                .unwrap()
        };
        let line: Vec<String> =
            fractions.iter().map(|f| format!("f{}={:.3}", f, auc(*f))).collect();
        let ok = auc(0.0) >= auc(1.0);
        if ok {
            a_wins += 1;
        }
        println!(
            "probe seed {seed}: {} -> (a) {} [{:.1}s]",
            line.join(" "),
            if ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f32()
        );
    }
    println!("(a) fraction0 >= fraction1 on {a_wins}/3 seeds\n");

    // (b) SafeBeam ASR on the harmful request set.
    let mut b_wins = 0;
    let mut base_asr: BTreeMap<(String, u64), f64> = BTreeMap::new();
    for &seed in &seeds {
        let t0 = Instant::now();
        let mut asr = BTreeMap::new();
        for &fraction in &fractions {
            let model = &models[&(format!("{fraction}"), seed)];
            let section = run_safety_eval(model, &hr, &safebeam, &judge, &[]).unwrap();
            asr.insert(format!("{fraction}"), section.asr_mean);
            base_asr.insert((format!("{fraction}"), seed), section.asr_mean);
        }
        let best_intervened = [0.0, 0.2, 0.6]
            .iter()
            .map(|f| asr[&format!("{f}")])
            .fold(f64::INFINITY, f64::min);
        let ok = best_intervened < asr["1"];
        if ok {
            b_wins += 1;
        }
        let line: Vec<String> =
            fractions.iter().map(|f| format!("f{}={:.3}", f, asr[&format!("{f}")])).collect();
        println!(
            "hr ASR seed {seed}: {} -> (b) {} [{:.1}s]",
            line.join(" "),
            if ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f32()
        );
    }
    println!("(b) min intervened < fraction1 on {b_wins}/3 seeds\n");

    // Info: completion-set ASR for seed 0.
    for &fraction in &fractions {
        let model = &models[&(format!("{fraction}"), 0)];
        let section = run_safety_eval(model, &hc, &safebeam, &judge, &[]).unwrap();
        println!("hc ASR seed 0 fraction {fraction}: {:.3}", section.asr_mean);
    }
    println!();

    // (c) math finetune fractions {0, 1}, compare mean SafeBeam ASR.
    let math = math_corpus(120, 11).unwrap();
    let mut mean0 = 0.0;
    let mut mean1 = 0.0;
    for &seed in &seeds {
        for &fraction in &[0.0, 1.0] {
            let t0 = Instant::now();
            let mut model = models[&(format!("{fraction}"), seed)].clone();
            let tc = TrainConfig {
                seed: derive_seed(seed, "mathft"),
                ..TrainConfig::finetune_defaults()
            };
            let mut state = TrainState::new(&model.config, tc.seed);
            finetune(&mut model, &math, &tc, &mut state, |_| {}).unwrap();
            let section = run_safety_eval(&model, &hr, &safebeam, &judge, &[]).unwrap();
            println!(
                "math-tuned seed {seed} fraction {fraction}: ASR {:.3} (base {:.3}) [{:.1}s]",
                section.asr_mean,
                base_asr[&(format!("{fraction}"), seed)],
                t0.elapsed().as_secs_f32()
            );
            if fraction == 0.0 {
                mean0 += section.asr_mean / seeds.len() as f64;
            } else {
                mean1 += section.asr_mean / seeds.len() as f64;
            }
        }
    }
    println!(
        "(c) mean math-tuned ASR: fraction0 {mean0:.3} vs fraction1 {mean1:.3} -> {}",
        if mean0 <= mean1 { "PASS" } else { "FAIL" }
    );
    let _ = BeamOptions { n_beams: 8, max_tokens: 64, drop_fraction: 0.25, mask_unsafe: true };
}
