//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::time::{Duration, Instant};

use concept_mmvae::eval::{relevance_score, ClassifierConfig, EmbeddingProvider, HierClassifier, Metric, RelevanceConfig};
use concept_mmvae::experiment::{self, ExperimentConfig, ResolvedConfig, TaxonomySource};
use concept_mmvae::moe::{self, Expert, ModalityId, ModalityObservation, MmvaeModel, ModelConfig};
use concept_mmvae::nn::{relative_errors, Activation, DenseNet, Tensor};
use concept_mmvae::retrieval::{FeatureIndex, LabelVocabulary, VocabularyEntry};
use concept_mmvae::seed::named_rng;
use concept_mmvae::taxonomy::{builtin_taxonomy, generate_dataset, Level, TaxonomyVariant};
use concept_mmvae::vae::{elbo_single, kl_standard_normal, GaussianPosterior, ModalityVae, VaeArchitecture};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

mod common;

type Outcome = Result<String, String>;

fn normals(rng: &mut concept_mmvae::seed::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn out_dir(tag: &str) -> tempfile::TempDir {
    tempfile::Builder::new().prefix(tag).tempdir().expect("tempdir")
}

/// Analytic gradient vs central differences at h = 1e-5 for `sum(output * v)`.
fn net_grad_error(net: &DenseNet<f64>, seed: u64, sampled: Option<usize>) -> f64 {
    let mut rng = named_rng(seed, "grad-oracle");
    let x = Tensor::matrix(2, net.in_dim(), normals(&mut rng, 2 * net.in_dim())).unwrap();
    let v = Tensor::matrix(2, net.out_dim(), normals(&mut rng, 2 * net.out_dim())).unwrap();
    let (_, cache) = net.forward(&x).unwrap();
    let analytic = net.backward(&cache, &v).unwrap().params_flat();
    // nets too large for a full sweep get a seeded sample of coordinates
    let coords: Vec<usize> = match sampled {
        Some(k) => rand::seq::index::sample(&mut rng, analytic.len(), k.min(analytic.len())).into_vec(),
        None => (0..analytic.len()).collect(),
    };
    let numeric = common::central_differences(net, &x, &v, 1e-5, Some(&coords));
    let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    relative_errors(&picked, &numeric, 1e-8).max_relative
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let desk = ExperimentConfig::default().resolve().unwrap().config;
    let full = ExperimentConfig { paper_scale: true, ..Default::default() }.resolve().unwrap().config;
    let mut worst: f64 = 0.0;
    let mut nets = 0;
    for (cfg, sampled) in [(&desk, None), (&full, Some(300))] {
        let model_cfg = cfg.model.clone().with_superordinate();
        for id in model_cfg.modality_ids() {
            let arch = model_cfg.architecture(id, cfg.generator.feature_dim, cfg.generator.embed_dim);
            for seed in [1u64, 2, 3] {
                let vae: ModalityVae<f64> = ModalityVae::init(&arch, seed).unwrap();
                for net in [vae.encoder(), vae.decoder()] {
                    worst = worst.max(net_grad_error(net, seed, sampled));
                    nets += 1;
                }
            }
        }
        let tax = builtin_taxonomy(TaxonomyVariant::Base);
        for seed in [1u64, 2, 3] {
            let clf: HierClassifier<f64> = HierClassifier::init(&tax, cfg.generator.feature_dim, &cfg.classifier.hidden, seed).unwrap();
            worst = worst.max(net_grad_error(clf.trunk(), seed, sampled));
            nets += 1;
            for l in Level::ALL {
                worst = worst.max(net_grad_error(clf.head(l), seed, sampled));
                nets += 1;
            }
        }
    }
    let took = start.elapsed();
    check(
        worst < 1e-5 && took < Duration::from_secs(30),
        format!("{nets} net instances, max relative error {worst:.2e}, {:.1}s", took.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let exact = kl_standard_normal(&GaussianPosterior::new(vec![1.0f64], vec![0.0]).unwrap());
    if (exact - 0.5).abs() > 1e-12 {
        return Err(format!("KL(N(1,1) || N(0,1)) = {exact}"));
    }
    let mut worst_z: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = named_rng(seed, "kl-posterior");
        let mean = normals(&mut rng, 3);
        let log_var: Vec<f64> = normals(&mut rng, 3).into_iter().map(|v| 0.8 * v).collect();
        let post = GaussianPosterior::new(mean.clone(), log_var.clone()).unwrap();
        let prior = GaussianPosterior::standard(3);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let eps = normals(&mut rng, 3);
            let z: Vec<f64> = (0..3).map(|j| mean[j] + (0.5 * log_var[j]).exp() * eps[j]).collect();
            let d = post.log_density(&z) - prior.log_density(&z);
            sum += d;
            sq += d * d;
        }
        let m = sum / n as f64;
        let se = ((sq / n as f64 - m * m) / n as f64).sqrt();
        let z = (m - kl_standard_normal(&post)).abs() / se;
        worst_z = worst_z.max(z);
    }
    check(worst_z < 3.0, format!("KL(1,0) = {exact}; worst Monte Carlo deviation {worst_z:.2} SE over 10 posteriors"))
}

fn gaussian_density_oracle(mean: &[f64], log_var: &[f64], z: &[f64]) -> f64 {
    let mut d = 1.0;
    for j in 0..z.len() {
        let var = log_var[j].exp();
        d *= (-(z[j] - mean[j]).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
    }
    d
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for (with_sup, m) in [(false, 3usize), (true, 4)] {
        let mut cfg = ModelConfig { latent_dim: 3, ..ModelConfig::desk_scale() };
        if with_sup {
            cfg = cfg.with_superordinate();
        }
        let model: MmvaeModel<f64> = MmvaeModel::init(&cfg, 8, 5, 17).unwrap();
        let weights = model.mixture_weights();
        if weights.len() != m || weights.iter().any(|&w| w != 1.0 / m as f64) {
            return Err(format!("weights {weights:?} for M = {m}"));
        }
        let mut rng = named_rng(m as u64, "moe-oracle");
        for _ in 0..20 {
            let mut obs = ModalityObservation::new();
            for e in model.experts() {
                obs.insert(e.id, normals(&mut rng, e.vae.observation_dim()));
            }
            let z = normals(&mut rng, 3);
            let oracle: f64 = model
                .experts()
                .iter()
                .map(|e| {
                    let p = e.vae.encode(obs.get(e.id).unwrap()).unwrap();
                    gaussian_density_oracle(&p.mean, &p.log_variance, &z)
                })
                .sum::<f64>()
                / m as f64;
            let got = model.joint_posterior_density(&z, &obs).unwrap();
            worst = worst.max((got - oracle).abs());
        }
    }
    let arch = VaeArchitecture {
        observation_dim: 6,
        latent_dim: 3,
        encoder_hidden: vec![8],
        decoder_hidden: vec![8],
        hidden_activation: Activation::Tanh,
    };
    let vae: ModalityVae<f64> = ModalityVae::init(&arch, 4).unwrap();
    let single = MmvaeModel::new(vec![Expert { id: ModalityId::Visual, vae: vae.clone() }]).unwrap();
    let mut rng = named_rng(4, "reduction");
    let mut bitwise = true;
    for _ in 0..20 {
        let x = normals(&mut rng, 6);
        let eps: Vec<Vec<f64>> = (0..2).map(|_| normals(&mut rng, 3)).collect();
        let obs = ModalityObservation::new().with(ModalityId::Visual, x.clone());
        let a = single.multimodal_elbo(&obs, std::slice::from_ref(&eps)).unwrap();
        bitwise &= a.to_bits() == elbo_single(&vae, &x, &eps).unwrap().to_bits();
    }
    check(
        worst <= 1e-12 && bitwise,
        format!("density vs oracle max |diff| {worst:.1e}; weights exactly 1/M for M = 3, 4; M = 1 bitwise: {bitwise}"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let resolved = ExperimentConfig::default().resolve().unwrap();
    let cfg = &resolved.config;
    let data = generate_dataset::<f64>(&builtin_taxonomy(TaxonomyVariant::Base), &cfg.generator);
    let model = MmvaeModel::init(&cfg.model, cfg.generator.feature_dim, cfg.generator.embed_dim, resolved.seeds.model_init).unwrap();
    let (_, trace) = moe::train(&model, &data, &cfg.train).unwrap();
    let (_, again) = moe::train(&model, &data, &cfg.train).unwrap();
    let took = start.elapsed();
    let head = trace[..200].iter().sum::<f64>() / 200.0;
    let tail = trace[trace.len() - 200..].iter().sum::<f64>() / 200.0;
    let identical = trace.iter().map(|v| v.to_bits()).eq(again.iter().map(|v| v.to_bits()));
    check(
        data.len() == 300 && trace.len() == 3000 && tail < head && identical && took < Duration::from_secs(600),
        format!(
            "{} examples, {} steps: first-200 mean {head:.3} -> last-200 mean {tail:.3}; rerun identical: {identical}; {:.1}s for two runs",
            data.len(),
            trace.len(),
            took.as_secs_f64()
        ),
    )
}

fn criterion_5() -> Outcome {
    let resolved = ExperimentConfig::default().resolve().unwrap();
    let g = &resolved.config.generator;
    let ratio = g.separation_scale / g.noise_scale;
    let prepared = experiment::prepare(&resolved).unwrap();
    let init = experiment::init_model(&resolved, &prepared).unwrap();
    let (model, _) = moe::train(&init, &prepared.train, &resolved.config.train).unwrap();
    let (report, _) = experiment::evaluate(&resolved, &prepared, &model).unwrap();
    let acc = |t: &concept_mmvae::eval::TestReport, l| t.get(l, Metric::Accuracy).unwrap().value;
    let (us, ub) = (acc(&report.understanding, Level::Subordinate), acc(&report.understanding, Level::Basic));
    let (ns, nb) = (acc(&report.naming, Level::Subordinate), acc(&report.naming, Level::Basic));
    check(
        ratio >= 4.0 && us >= 0.80 && ub >= 0.90 && ns >= 0.80 && nb >= 0.90,
        format!("separation/noise {ratio}; understanding sub {us:.3} basic {ub:.3}; naming sub {ns:.3} basic {nb:.3} (need 0.80 / 0.90)"),
    )
}

struct Fixed(Vec<f64>);

impl EmbeddingProvider<f64> for Fixed {
    fn concept(&self, _: &str) -> Option<Vec<f64>> {
        Some(self.0.clone())
    }

    fn visual(&self, feature: &[f64]) -> Vec<f64> {
        feature.to_vec()
    }
}

fn criterion_6() -> Outcome {
    let mut rng = named_rng(6, "relevance");
    let mut in_range = true;
    for _ in 0..1000 {
        let c = normals(&mut rng, 5);
        let v = normals(&mut rng, 5);
        let w = rng.random_range(0.0..3.0);
        let r = relevance_score("c", &v, &Fixed(c), &RelevanceConfig { w }).unwrap();
        in_range &= (0.0..=w).contains(&r);
    }
    let mut anti_zero = true;
    for _ in 0..100 {
        let c = normals(&mut rng, 5);
        let v: Vec<f64> = c.iter().map(|x| -2.5 * x).collect();
        anti_zero &= relevance_score("c", &v, &Fixed(c), &RelevanceConfig { w: 2.0 }).unwrap() == 0.0;
    }
    let resolved = ExperimentConfig { classifier: ClassifierConfig { steps: 50, ..Default::default() }, ..Default::default() }
        .resolve()
        .unwrap();
    let prepared = experiment::prepare(&resolved).unwrap();
    let model = experiment::init_model(&resolved, &prepared).unwrap();
    let (report, _) = experiment::evaluate(&resolved, &prepared, &model).unwrap();
    let gt: Vec<f64> = report.naming.rows.iter().filter(|r| r.metric == Metric::Accuracy).map(|r| r.baseline).collect();
    check(
        in_range && anti_zero && !gt.is_empty() && gt.iter().all(|&b| b == 1.0),
        format!("relevance in [0, w]: {in_range}; anti-aligned exactly 0: {anti_zero}; ground-truth naming accuracy {gt:?}"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = named_rng(7, "retrieval");
    // integer coordinates make exact distance ties common
    let entries: Vec<(Vec<f64>, usize)> = (0..1000)
        .map(|i| ((0..3).map(|_| rng.random_range(-3i32..=3) as f64).collect(), 5000 - 3 * i))
        .collect();
    let index = FeatureIndex::new(entries.clone()).unwrap();
    let mut feature_ok = 0;
    let mut feature_ties = 0;
    for q in 0..100 {
        let query: Vec<f64> = if q % 2 == 0 {
            (0..3).map(|_| rng.random_range(-3i32..=3) as f64 + 0.5).collect()
        } else {
            normals(&mut rng, 3)
        };
        let dist = |v: &[f64]| v.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = entries.iter().map(|(v, _)| dist(v)).fold(f64::INFINITY, f64::min);
        let winners: Vec<usize> = entries.iter().filter(|(v, _)| dist(v) == best).map(|e| e.1).collect();
        if winners.len() > 1 {
            feature_ties += 1;
        }
        let expected = *winners.iter().min().unwrap();
        let (id, d) = index.nearest_feature(&query).unwrap();
        if id == expected && d == best.sqrt() {
            feature_ok += 1;
        }
    }

    let base: Vec<Vec<f64>> = (0..250)
        .map(|_| {
            let v = normals(&mut rng, 8);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    // four names per embedding: exact cosine ties
    let vocab_entries: Vec<VocabularyEntry<f64>> = (0..1000)
        .map(|i| VocabularyEntry { name: format!("w{:04}", (i * 7919) % 1000), embedding: base[i % 250].clone(), level: Level::Basic })
        .collect();
    let vocab = LabelVocabulary::new(vocab_entries.clone()).unwrap();
    let mut label_ok = 0;
    let mut label_ties = 0;
    for q in 0..100 {
        let query = if q % 2 == 0 { base[rng.random_range(0..250)].iter().map(|x| x * 3.0).collect() } else { normals(&mut rng, 8) };
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = |v: &[f64]| v.iter().zip(&query).map(|(a, b)| a * b).sum::<f64>() / qn;
        let best = vocab_entries.iter().map(|e| cos(&e.embedding)).fold(f64::NEG_INFINITY, f64::max);
        let mut winners: Vec<&str> = vocab_entries.iter().filter(|e| cos(&e.embedding) == best).map(|e| e.name.as_str()).collect();
        winners.sort_unstable();
        if winners.len() > 1 {
            label_ties += 1;
        }
        if vocab.nearest_label(&query, Level::Basic).unwrap().0 == winners[0] {
            label_ok += 1;
        }
    }
    check(
        feature_ok == 100 && label_ok == 100 && feature_ties > 0 && label_ties > 0,
        format!("nearest_feature {feature_ok}/100 ({feature_ties} ties); nearest_label {label_ok}/100 ({label_ties} ties)"),
    )
}

fn quick_config(out: &std::path::Path) -> ResolvedConfig {
    let mut cfg = ExperimentConfig { output_dir: out.to_owned(), ..Default::default() };
    cfg.train.steps = 300;
    cfg.classifier.steps = 300;
    cfg.resolve().unwrap()
}

fn criterion_8() -> Outcome {
    let dir = out_dir("ablate");
    let resolved = quick_config(dir.path());
    let (results, rows) = experiment::cmd_ablate(&resolved).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = results.iter().map(|r| r.subordinate_concepts).collect();
    let mut dataset_counts = Vec::new();
    for variant in TaxonomyVariant::ALL {
        let d = generate_dataset::<f64>(&builtin_taxonomy(variant), &resolved.config.generator);
        let mut subs: Vec<_> = d.examples.iter().map(|e| e.labels.subordinate).collect();
        subs.sort();
        subs.dedup();
        dataset_counts.push(subs.len());
    }
    let per_variant_shape = TaxonomyVariant::ALL.iter().all(|&v| rows.iter().filter(|r| r.variant == v).count() == 4);

    let standalone_dir = out_dir("standalone");
    let mut standalone = quick_config(standalone_dir.path());
    standalone.config.taxonomy = TaxonomySource::Variant(TaxonomyVariant::Base);
    experiment::cmd_train(&standalone).map_err(|e| e.to_string())?;
    let report = experiment::cmd_eval(&standalone, None).map_err(|e| e.to_string())?;
    let base_rows = experiment::ablation_rows(TaxonomyVariant::Base, &report, &standalone.config.eval.levels).unwrap();
    let ablated_base: Vec<_> = rows.iter().filter(|r| r.variant == TaxonomyVariant::Base).cloned().collect();
    let bits = |r: &experiment::AblationRow| (r.level, r.ground_truth, r.language_to_vision.to_bits(), r.vision_to_language.to_bits());
    let agree = base_rows.iter().map(bits).eq(ablated_base.iter().map(bits))
        && report.understanding == results[0].report.understanding
        && report.naming == results[0].report.naming;
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let header_ok = csv.lines().any(|l| l == "variant,level,row,language_to_vision,vision_to_language");
    check(
        counts == [15, 25, 21] && dataset_counts == [15, 25, 21] && per_variant_shape && agree && header_ok,
        format!("subordinate concepts {counts:?} (datasets {dataset_counts:?}); 4 rows x 2 columns per variant: {per_variant_shape}; base equals standalone bitwise: {agree}"),
    )
}

fn criterion_9() -> Outcome {
    let resolved = ExperimentConfig::default().resolve().unwrap();
    let prepared = experiment::prepare(&resolved).unwrap();
    let model = experiment::init_model(&resolved, &prepared).unwrap();
    let (report, _) = experiment::evaluate(&resolved, &prepared, &model).unwrap();
    let n = prepared.test.len() as f64;
    let mut lines = Vec::new();
    let mut ok = true;
    for level in [Level::Subordinate, Level::Basic] {
        let k = prepared.dataset.taxonomy.at_level(level).len() as f64;
        let p = 1.0 / k;
        let sigma = (p * (1.0 - p) / n).sqrt();
        let acc = report.naming.get(level, Metric::Accuracy).unwrap().value;
        ok &= (acc - p).abs() <= 3.0 * sigma;
        lines.push(format!("{level} {acc:.3} vs chance {p:.3} +/- {:.3}", 3.0 * sigma));
    }
    check(ok, format!("untrained naming accuracy: {}", lines.join("; ")))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient oracle", criterion_1),
        ("2 KL correctness", criterion_2),
        ("3 MoE identities", criterion_3),
        ("4 training progress", criterion_4),
        ("5 cross-modal competence", criterion_5),
        ("6 metric properties", criterion_6),
        ("7 retrieval exactness", criterion_7),
        ("8 ablation structure", criterion_8),
        ("9 chance-level control", criterion_9),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {name}: PASS ({secs:.1}s) {msg}"),
            Err(msg) => {
                println!("criterion {name}: FAIL ({secs:.1}s) {msg}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
