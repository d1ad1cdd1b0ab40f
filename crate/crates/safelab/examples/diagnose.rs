//! Scratch diagnostic: dump SafeBeam generations + judge categories for the
//! reduced curriculum sweep. Run: cargo run -p safelab --release --example diagnose [budget] [tag_rate]

use safelab::curriculum::make_schedule;
use safelab::decode::{beam_decode, BeamOptions, ModelScorer};
use safelab::eval::{Judge, PromptSet, RuleJudge};
use safelab::fixtures::{
    self, intervention_mixture, math_corpus, prepared_corpora, refusal_lexicon, safe_mixture,
    CorpusOptions,
};
use safelab::model::{Model, ModelConfig};
use safelab::rng::derive_seed;
use safelab::trainer::{finetune, pretrain, PretrainOpts, TrainConfig, TrainState};
use std::collections::BTreeMap;
use std::time::Instant;

fn show(model: &Model<f32>, set: &PromptSet, n_show: usize, judge: &RuleJudge, label: &str) {
    let scorer = ModelScorer::new(model);
    let opts = BeamOptions { n_beams: 8, max_tokens: 64, drop_fraction: 0.25, mask_unsafe: true };
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for (i, item) in set.items.iter().enumerate() {
        let ids = set.encode_prompt(item);
        let (gen, trace) = beam_decode(&scorer, &ids, &opts).unwrap();
        let verdict = judge.judge(&item.text, &gen).unwrap();
        *histogram.entry(verdict.category.as_str().to_string()).or_default() += 1;
        if i < n_show {
            let mut text = gen.text.replace('\n', "\\n");
            let mut cut = text.len().min(100);
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            text.truncate(cut);
            println!(
                "  [{label}] {:?} -> {:?} ({} steps, term {:?}, cat {})",
                &item.text[..item.text.len().min(48)],
                text,
                gen.steps.len(),
                trace.winner.termination,
                verdict.category.as_str()
            );
        }
    }
    println!("  [{label}] histogram: {histogram:?}");
}

fn main() {
    let budget: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1_000_000);
    let tag_rate: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.10);
    let peak_lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let corpora = prepared_corpora(&CorpusOptions::default(), 0.5).unwrap();
    let judge = RuleJudge::new(refusal_lexicon());
    let hr = fixtures::harmful_request_set();
    let hc = fixtures::harmful_completion_set();
    let bn = fixtures::benign_request_set();
    let math = math_corpus(120, 11).unwrap();

    for &seed in &[0u64, 1] {
        for &fraction in &[0.0, 1.0] {
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
                peak_lr,
                min_lr: peak_lr / 10.0,
                seed: derive_seed(seed, "pretrain"),
                ..TrainConfig::default()
            };
            let mut state = TrainState::new(&mc, tc.seed);
            pretrain(
                &mut model,
                &schedule,
                &corpora,
                &tc,
                &mut state,
                PretrainOpts { pause_at_step: None, checkpoint_dir: None },
                |_| {},
            )
            .unwrap();
            println!(
                "=== seed {seed} fraction {fraction} ({} steps, {:.1}s) ===",
                state.step,
                t0.elapsed().as_secs_f32()
            );
            show(&model, &hr, 3, &judge, "hr");
            show(&model, &hc, 2, &judge, "hc");
            show(&model, &bn, 2, &judge, "bn");

            let ftc = TrainConfig {
                seed: derive_seed(seed, "mathft"),
                ..TrainConfig::finetune_defaults()
            };
            let mut ft_state = TrainState::new(&model.config, ftc.seed);
            let mut tuned = model.clone();
            finetune(&mut tuned, &math, &ftc, &mut ft_state, |_| {}).unwrap();
            show(&tuned, &hr, 3, &judge, "hr/math");
        }
    }
}
