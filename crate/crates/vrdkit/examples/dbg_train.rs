use vrdkit::data::{build_eval_images, build_instance_pool, generate_synthetic, SyntheticSpec};
use vrdkit::eval::{evaluate, RandomScorer};
use vrdkit::fusion::{CandidateSet, FusionConfig, FusionModel, MetricPolarity};
use vrdkit::kg::VisualRelationKG;
use vrdkit::text::{prompt_vocabulary, TemplateKind, TokenEmbeddingTable};
use vrdkit::trainer::{sample_support, train, Benchmark, EpisodeConfig, OptimizerKind, TrainConfig};
use vrdkit::vrk::{train_reconstruction, EncoderDims, ReconstructionConfig, RelationEncoder, SamplingMode};

fn run(seed: u64, noise: f64, use_textual: bool, use_vrk: bool, epochs: usize)
    -> (f64, f64, f64, f64) // (psR@20, puR@20, tsR@20, R@20-seen-random-baseline-placeholder)
{
    let mut spec = SyntheticSpec::balanced(12, 10, 16, noise, 0.3, seed);
    spec.train_images = 60;
    spec.test_images = 30;
    let bundle = generate_synthetic(&spec).unwrap();
    let candidates = CandidateSet::new(&bundle.relation_names).unwrap();
    let pool = build_instance_pool(&bundle.train, &bundle.features, &candidates).unwrap();
    let support = sample_support(&pool, &candidates, &EpisodeConfig {
        benchmark: Benchmark::Custom(bundle.relation_names.clone()),
        shots: 5, negative_ratio: 1.0, seed,
    }).unwrap();

    let vrk = if use_vrk {
        let lexicon = vrdkit::caption::Lexicon::embedded();
        let mut triplets = Vec::new();
        for c in &bundle.captions { triplets.extend(vrdkit::caption::extract_from_caption(c, &lexicon)); }
        let graph = VisualRelationKG::build(&triplets);
        let enc = RelationEncoder::init(&graph, EncoderDims::default(), seed).unwrap();
        Some(train_reconstruction(enc, &graph, &ReconstructionConfig {
            epochs: 150, learning_rate: 0.05, seed, sampling: SamplingMode::CountWeighted,
        }).unwrap().encoder)
    } else { None };

    let vocab = prompt_vocabulary(&bundle.class_names, &bundle.relation_names);
    let table = TokenEmbeddingTable::seeded(&vocab, 24, seed);
    let model = FusionModel::build(candidates.clone(), &table, vrk, &FusionConfig {
        d_v: 16, h: 24, template: TemplateKind::Triplet,
        use_textual, use_vrk, polarity: MetricPolarity::Similarity, seed,
    }).unwrap();
    let out = train(model, &support.instances, &TrainConfig {
        epochs, learning_rate: 5e-3, optimizer: OptimizerKind::Adam,
        batch_size: 32, seed, use_textual, use_vrk,
    }).unwrap();

    let images = build_eval_images(&bundle.test, &bundle.features, &candidates).unwrap();
    let names: Vec<String> = candidates.predicates().to_vec();
    let mut model = out.model;
    let report = evaluate(&mut model, &images, &names, &support.seen, &[20], false).unwrap();
    let g = |m: &std::collections::BTreeMap<String, Option<f64>>| m["20"].unwrap_or(f64::NAN);
    (g(&report.seen.pair), g(&report.unseen.pair), g(&report.seen.triplet), g(&report.mean_recall))
}

fn main() {
    println!("{:>4} {:>22} {:>8} {:>8} {:>8} {:>8}", "seed", "variant", "psR@20", "puR@20", "tsR@20", "mR@20");
    let mut sums = [[0.0f64; 2]; 3];
    for seed in 0..5u64 {
        for (vi, (name, ut, uv)) in [("full", true, true), ("no-vrk", true, false), ("static-text", false, true)].iter().enumerate() {
            let (ps, pu, ts, mr) = run(seed, 0.25, *ut, *uv, 150);
            println!("{seed:>4} {name:>22} {ps:>8.3} {pu:>8.3} {ts:>8.3} {mr:>8.3}");
            sums[vi][0] += ps; sums[vi][1] += pu;
        }
    }
    println!("\nmeans over 5 seeds:");
    for (vi, name) in ["full", "no-vrk", "static-text"].iter().enumerate() {
        println!("{name:>22}: psR {:.4} puR {:.4}", sums[vi][0]/5.0, sums[vi][1]/5.0);
    }

    // criterion-7 style check: separable (low noise) full model, psR@20
    let (ps, pu, _, _) = run(99, 0.05, true, true, 150);
    println!("\nseparable seed 99: psR@20 {ps:.3} puR@20 {pu:.3}");
    // random baseline sanity
    let mut spec = SyntheticSpec::balanced(12, 10, 16, 0.05, 0.3, 99);
    spec.train_images = 60; spec.test_images = 30;
    let bundle = generate_synthetic(&spec).unwrap();
    let candidates = CandidateSet::new(&bundle.relation_names).unwrap();
    let images = build_eval_images(&bundle.test, &bundle.features, &candidates).unwrap();
    let names: Vec<String> = candidates.predicates().to_vec();
    let mut rnd = RandomScorer::new(candidates.len(), 0, 1234);
    let report = evaluate(&mut rnd, &images, &names, &Default::default(), &[20], false).unwrap();
    println!("random R@20 {:?} (expect ~20/120=0.167)", report.recall["20"]);
}
