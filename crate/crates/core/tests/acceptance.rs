//! Acceptance criteria 1–8. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 5 7`.

mod common;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use chirpbed::augment::{mix_signals, sample_mixture_spec, MixupConfig};
use chirpbed::eval::{average_precision, roc_auc, ScoredExample, TaskType};
use chirpbed::frontend::{compute_logmel, FrontendConfig};
use chirpbed::harness::checkpoint::{sha256, Checkpoint};
use chirpbed::harness::pipeline::{self, SourcedRecord, TaskManifests};
use chirpbed::ingest::{AudioBuffer, Taxon, TaxonLevel};
use chirpbed::model::Similarity;
use chirpbed::synth::{desk_taxonomy, generate_corpus, planted_burst, write_corpus, CorpusConfig, SpeciesSpec};
use chirpbed::train::PhaseConfig;
use chirpbed::windowing::{find_energy_peaks, select_window_from_peaks, WindowStrategy, PEAK_WINDOW_S};
use common::gradcheck::{case, check_all, dims};
use common::oracles::{ap_oracle, auc_oracle, MelOracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_input(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let tones: Vec<(f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| (rng.random_range(30.0..15_990.0), rng.random_range(0.0..0.5), rng.random_range(0.0..6.3)))
        .collect();
    let noise = rng.random_range(0.0..0.3);
    let gate = rng.random_range(0..160_000);
    (0..160_000)
        .map(|i| {
            if i < gate / 4 {
                return 0.0;
            }
            let t = i as f64 / 32_000.0;
            let s: f64 = tones.iter().map(|(f, a, ph)| a * (2.0 * std::f64::consts::PI * f * t + ph).sin()).sum();
            (s + noise * rng.random_range(-1.0..1.0)) as f32
        })
        .collect()
}

fn frontend_golden() -> Outcome {
    let cfg = FrontendConfig::default();
    let oracle = MelOracle::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let (mut worst, mut spent, mut shapes) = (0.0f64, Duration::ZERO, true);
    for _ in 0..20 {
        let x = random_input(&mut rng);
        let start = Instant::now();
        let got = compute_logmel(&AudioBuffer::new(x.clone(), 32_000), &cfg).map_err(|e| e.to_string())?;
        spent += start.elapsed();
        shapes &= (got.frames, got.bins) == (500, 128);
        for (t, row) in oracle.compute(&x).iter().enumerate() {
            for (b, &w) in row.iter().enumerate() {
                worst = worst.max((got.get(t, b) - w).abs());
            }
        }
    }
    let silent = compute_logmel(&AudioBuffer::new(vec![0.0; 160_000], 32_000), &cfg).map_err(|e| e.to_string())?;
    let floor = 0.1 * 1e-5f64.ln();
    let silence = silent.values.iter().all(|&v| v == floor) && (silent.frames, silent.bins) == (500, 128);
    check(
        worst <= 1e-5 && silence && shapes && spent < Duration::from_secs(10),
        format!("max |diff| {worst:.2e}, silence exact {silence}, shape (500, 128) {shapes}, frontend time {spent:.2?}"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (mut worst, mut zero, mut count) = (0.0f64, true, 0);
    for (sim, dropout, seed) in [(Similarity::Dot, 0.0, 1), (Similarity::Dot, 0.3, 2), (Similarity::Cosine, 0.3, 3)] {
        let (reports, exact_zero) = check_all(&case(dims(16, sim), seed, dropout), 1e-4);
        zero &= exact_zero;
        count += reports.len();
        worst = reports.iter().fold(worst, |w, r| w.max(r.rel_err));
    }
    let spent = start.elapsed();
    check(
        worst < 1e-4 && zero && spent < Duration::from_secs(120),
        format!("{count} term/block pairs, max rel err {worst:.2e}, stop-gradient exact {zero}, {spent:.2?}"),
    )
}

fn metric_oracles() -> Outcome {
    let examples = |s: &[f64], l: &[bool]| s.iter().zip(l).map(|(&s, &l)| ScoredExample::new(s, l)).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let (mut worst, mut instances, mut errors_ok) = (0.0f64, 0usize, true);
    for n in 1..=12usize {
        for coarse in [false, true] {
            let scores: Vec<f64> = (0..n)
                .map(|_| if coarse { rng.random_range(0..3) as f64 } else { rng.random::<f64>() })
                .collect();
            for mask in 0u32..(1 << n) {
                let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let ex = examples(&scores, &labels);
                let pos = labels.iter().filter(|&&l| l).count();
                match average_precision(&ex) {
                    Ok(ap) if pos > 0 => worst = worst.max((ap - ap_oracle(&scores, &labels)).abs()),
                    Err(_) if pos == 0 => {}
                    _ => errors_ok = false,
                }
                match roc_auc(&ex) {
                    Ok(auc) if pos > 0 && pos < n => worst = worst.max((auc - auc_oracle(&scores, &labels)).abs()),
                    Err(_) if pos == 0 || pos == n => {}
                    _ => errors_ok = false,
                }
                instances += 1;
            }
        }
    }
    for _ in 0..1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[n - 1] = false;
        let ex = examples(&scores, &labels);
        let auc = roc_auc(&ex).map_err(|e| e.to_string())?;
        let ap = average_precision(&ex).map_err(|e| e.to_string())?;
        worst = worst.max((auc - auc_oracle(&scores, &labels)).abs());
        worst = worst.max((ap - ap_oracle(&scores, &labels)).abs());
        instances += 1;
    }
    check(
        worst <= 1e-9 && errors_ok,
        format!("{instances} instances, max |diff| {worst:.2e}, undefined cases rejected {errors_ok}"),
    )
}

fn mixup_statistics() -> Outcome {
    let cfg = PhaseConfig::phase_one().mixup();
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let draws = 100_000;
    let mut extra = Vec::with_capacity(draws);
    for _ in 0..draws {
        extra.push((sample_mixture_spec(&cfg, &mut rng).map_err(|e| e.to_string())?.len() - 1) as f64);
    }
    let mean = extra.iter().sum::<f64>() / draws as f64;
    let var = extra.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let se = (var / draws as f64).sqrt();
    let want = cfg.n as f64 * cfg.alpha / (cfg.alpha + cfg.beta);
    let z = (mean - want) / se;

    let unit = |rng: &mut ChaCha8Rng| {
        let x: Vec<f64> = (0..32_000).map(|_| StandardNormal.sample(rng)).collect();
        let r = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        x.into_iter().map(|v| (v / r) as f32).collect::<Vec<f32>>()
    };
    let wide = MixupConfig { n: 4, ..cfg };
    let mut worst = 0.0f64;
    for i in 0..400 {
        let w = sample_mixture_spec(if i % 2 == 0 { &cfg } else { &wide }, &mut rng).map_err(|e| e.to_string())?;
        let comps: Vec<Vec<f32>> = (0..w.len()).map(|_| unit(&mut rng)).collect();
        let refs: Vec<&[f32]> = comps.iter().map(|c| c.as_slice()).collect();
        let mixed = mix_signals(&refs, &w).map_err(|e| e.to_string())?;
        let rms = (mixed.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / mixed.len() as f64).sqrt();
        worst = worst.max((rms - 1.0).abs());
    }
    check(
        z.abs() < 3.0 && worst < 0.05,
        format!("mean N-1 {mean:.4} vs {want:.4} ({z:+.2} SE), worst RMS deviation {:.2}%", worst * 100.0),
    )
}

fn peak_recovery() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let trials = 200;
    let mut hits = 0;
    for _ in 0..trials {
        let center = rng.random_range(2.0..58.0);
        let audio = planted_burst(60.0, center, 0.5, 12.0, 0.02, &mut rng);
        let peaks = find_energy_peaks(&audio).map_err(|e| e.to_string())?;
        if peaks.first().is_some_and(|p| (p.time_s - center).abs() <= 0.6) {
            hits += 1;
        }
    }
    let mut fallback = 0;
    for _ in 0..trials {
        let secs = rng.random_range(1.0..60.0);
        let audio = AudioBuffer::new(vec![0.0; (secs * 32_000.0) as usize], 32_000);
        let peaks = find_energy_peaks(&audio).map_err(|e| e.to_string())?;
        let w = select_window_from_peaks("silent", secs, &peaks, WindowStrategy::Peak, &mut rng);
        if peaks.is_empty() && w.start_s >= 0.0 && w.end_s() <= PEAK_WINDOW_S + 1e-12 {
            fallback += 1;
        }
    }
    let spent = start.elapsed();
    let rate = hits as f64 / trials as f64;
    check(
        rate >= 0.95 && fallback == trials && spent < Duration::from_secs(180),
        format!("top peak within 0.6 s in {hits}/{trials} ({:.1}%), silence fallback {fallback}/{trials}, {spent:.2?}", rate * 100.0),
    )
}

fn taxonomy_map(species: &[SpeciesSpec]) -> HashMap<String, Taxon> {
    species
        .iter()
        .map(|s| {
            let t = Taxon { genus: s.genus.clone(), family: s.family.clone(), order: s.order.clone() };
            (s.species.clone(), t)
        })
        .collect()
}

fn write_and_load(dir: &Path, species: &[SpeciesSpec], cfg: &CorpusConfig) -> Result<PathBuf, String> {
    let items = generate_corpus(species, cfg).map_err(|e| e.to_string())?;
    write_corpus(dir, &items).map_err(|e| e.to_string())?;
    Ok(dir.to_path_buf())
}

fn load(path: PathBuf) -> Result<Vec<SourcedRecord>, String> {
    SourcedRecord::load_manifest(&path).map_err(|e| e.to_string())
}

fn report_for(ck: &Checkpoint, manifests: &TaskManifests, tasks: &[TaskType], seed: u64) -> Result<chirpbed::eval::QualityReport, String> {
    let sum = sha256(&ck.to_bytes().map_err(|e| e.to_string())?);
    let out = pipeline::embed_records(&ck.params, sum, &manifests.union(tasks), 2.5).map_err(|e| e.to_string())?;
    if let Some((id, e)) = out.failures.first() {
        return Err(format!("{id}: {e}"));
    }
    pipeline::evaluate(&out.file, Some(ck), manifests, tasks, seed).map_err(|e| e.to_string())
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let species = desk_taxonomy();
    let corpus = write_and_load(&tmp.path().join("desk"), &species, &CorpusConfig::default())?;
    let transfer_cfg = CorpusConfig { dataset: "transfer".into(), per_species: 25, eval_per_species: 25, seed: 606, ..Default::default() };
    let transfer_dir = write_and_load(&tmp.path().join("transfer"), &species, &transfer_cfg)?;
    let train_recs = load(corpus.join("train.jsonl"))?;
    let held_out = load(corpus.join("eval.jsonl"))?;

    let steps = 1000;
    let one = PhaseConfig { learning_rate: 1e-3, max_steps: steps, batch_size: 64, validate_every: steps, ..PhaseConfig::phase_one() };
    let p1 = pipeline::train(&one, &train_recs, None, None, Some(&held_out)).map_err(|e| e.to_string())?;
    let top1 = p1.log.last().and_then(|e| e.validation_top1).unwrap_or(0.0);

    let two_steps = 100;
    let two = PhaseConfig { max_steps: two_steps, batch_size: 64, ..PhaseConfig::phase_two() };
    let p2 = pipeline::train(&two, &train_recs, None, Some(p1.checkpoint.clone()), None).map_err(|e| e.to_string())?;

    let manifests = TaskManifests {
        classify: held_out.clone(),
        retrieval: held_out,
        transfer: load(transfer_dir.join("all.jsonl"))?,
    };
    let tasks = [TaskType::Classify, TaskType::Retrieval, TaskType::Transfer];
    let r1 = report_for(&p1.checkpoint, &manifests, &tasks, 0)?;
    let r2 = report_for(&p2.checkpoint, &manifests, &tasks, 0)?;
    let get = |x: Option<f64>| x.unwrap_or(f64::NAN);
    let (ret, o1, o2, t1, t2) = (get(r1.retrieval), get(r1.overall), get(r2.overall), get(r1.transfer), get(r2.transfer));
    let spent = start.elapsed();
    check(
        top1 >= 0.90 && ret >= 0.95 && o1 - o2 <= 0.02 && t1 - t2 <= 0.01,
        format!(
            "phase one {steps} steps: held-out top-1 {top1:.3}, retrieval {ret:.3}, overall {o1:.3}, transfer {t1:.3}; \
             phase two {two_steps} steps: overall {o2:.3}, transfer {t2:.3}; {spent:.0?}"
        ),
    )
}

fn granularity() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let species = desk_taxonomy();
    let train_cfg = CorpusConfig { per_species: 40, eval_per_species: 0, ..Default::default() };
    let train_dir = write_and_load(&tmp.path().join("train"), &species, &train_cfg)?;
    let probe_cfg = CorpusConfig {
        dataset: "probe".into(),
        per_species: 40,
        eval_per_species: 40,
        min_s: 5.0,
        max_s: 5.0,
        noise_rms: 0.05,
        seed: 99,
    };
    let probe_dir = write_and_load(&tmp.path().join("probe"), &species, &probe_cfg)?;
    let records = load(train_dir.join("all.jsonl"))?;
    let manifests = TaskManifests { transfer: load(probe_dir.join("all.jsonl"))?, ..Default::default() };

    let mut aucs = Vec::new();
    for level in [TaxonLevel::Species, TaxonLevel::Genus, TaxonLevel::Family] {
        let cfg = PhaseConfig { learning_rate: 1e-3, max_steps: 150, batch_size: 64, label_level: level, ..PhaseConfig::phase_one() };
        let out = pipeline::train(&cfg, &records, Some(taxonomy_map(&species)), None, None).map_err(|e| e.to_string())?;
        let mut total = 0.0;
        for seed in 0..3 {
            let r = report_for(&out.checkpoint, &manifests, &[TaskType::Transfer], seed)?;
            total += r.transfer.unwrap_or(f64::NAN);
        }
        aucs.push(total / 3.0);
    }
    let monotone = aucs[0] >= aucs[1] && aucs[1] >= aucs[2];
    let gap = aucs[0] - aucs[2];
    let spent = start.elapsed();
    check(
        monotone && gap >= 0.05,
        format!(
            "8-way probe ROC-AUC species {:.4}, genus {:.4}, family {:.4}; gap {gap:.4}; {spent:.0?}",
            aucs[0], aucs[1], aucs[2]
        ),
    )
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let bin = env!("CARGO_BIN_EXE_chirpbed");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
        }
    };
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let corpus = dir.join("corpus");
    run(&["synth", "--out-dir", &s(&corpus), "--per-species", "6", "--eval-per-species", "2", "--min-s", "3", "--max-s", "12"])?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
    let mut same = Vec::new();
    for phase in ["one", "two"] {
        let mut outputs = Vec::new();
        for k in 0..2 {
            let ck = dir.join(format!("{phase}{k}.ckpt"));
            let mut args = vec![
                "train".to_string(),
                "--manifest".into(),
                s(&corpus.join("train.jsonl")),
                "--phase".into(),
                phase.into(),
                "--max-steps".into(),
                "4".into(),
                "--batch-size".into(),
                "8".into(),
                "--seed".into(),
                "7".into(),
                "--out".into(),
                s(&ck),
            ];
            if phase == "two" {
                args.extend(["--init-from".into(), s(&dir.join("one0.ckpt"))]);
            }
            run(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
            outputs.push((read(&ck)?, read(Path::new(&format!("{}.log.jsonl", ck.display())))?));
        }
        same.push(outputs[0] == outputs[1]);
    }
    let mut reports = Vec::new();
    for k in 0..2 {
        let out = dir.join(format!("report{k}.json"));
        run(&[
            "eval",
            "--checkpoint",
            &s(&dir.join("two0.ckpt")),
            "--classify",
            &s(&corpus.join("eval.jsonl")),
            "--retrieval",
            &s(&corpus.join("all.jsonl")),
            "--seed",
            "5",
            "--out",
            &s(&out),
        ])?;
        reports.push((read(&out)?, read(&out.with_extension("csv"))?));
    }
    same.push(reports[0] == reports[1]);
    check(
        same.iter().all(|&b| b),
        format!("train phase one {}, train phase two {}, eval {}", same[0], same[1], same[2]),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("frontend golden", frontend_golden),
        ("gradient suite", gradient_suite),
        ("metric oracles", metric_oracles),
        ("mixup statistics", mixup_statistics),
        ("peak-finder recovery", peak_recovery),
        ("desk-scale end-to-end", end_to_end),
        ("granularity trend", granularity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
