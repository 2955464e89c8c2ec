//! Acceptance run: one PASS/FAIL line per criterion, then a summary. Exits
//! non-zero when any criterion fails.
//!
//! Criteria 4 to 9 train real models on the default synthetic benchmark
//! (5 seeds, 500 shared episodes) and share the trained runs through a cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use isolab::experiment::{self, RunOutcome, Splits};
use isolab_core::data::{generate_synthetic, SplitSpec, SynthConfig};
use isolab_core::fewshot::{mean, EpisodeSpec};
use isolab_core::geometry;
use isolab_core::model::{EncoderConfig, ModelParams, OutputActivation, Tokenizer};
use isolab_core::numcore::{compare_gradients, finite_diff_grad, Tape};
use isolab_core::objectives::{
    self, cor_reg, cor_reg_var, joint_loss, joint_loss_and_grads, Batch, CovVariant,
    ObjectiveConfig, ZeroClock,
};
use isolab_core::training::{adam_step, AdamConfig, AdamState, TrainConfig};
use isolab_core::{Matrix, Rng};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Trained runs keyed by objective label, so criteria share models.
struct Bench {
    splits: Splits,
    spec: EpisodeSpec,
    /// Runs of each objective with the time spent training and scoring them.
    runs: BTreeMap<String, (Vec<RunOutcome>, Duration)>,
}

impl Bench {
    fn new() -> Self {
        let data = generate_synthetic(&SynthConfig::default()).unwrap();
        let split = SplitSpec::default_for(&data).unwrap();
        Bench {
            splits: Splits::new(&data, &split).unwrap(),
            spec: EpisodeSpec::default(),
            runs: BTreeMap::new(),
        }
    }

    fn runs(&mut self, objective: &ObjectiveConfig) -> &[RunOutcome] {
        let key = format!("{objective:?}");
        if !self.runs.contains_key(&key) {
            let start = Instant::now();
            let runs = SEEDS
                .iter()
                .map(|&seed| {
                    let cfg = TrainConfig {
                        seed,
                        objective: objective.clone(),
                        ..TrainConfig::desk()
                    };
                    experiment::run(&self.splits, &cfg, &self.spec, &ZeroClock).unwrap()
                })
                .collect();
            self.runs.insert(key.clone(), (runs, start.elapsed()));
        }
        &self.runs[&key].0
    }

    fn elapsed(&mut self, objective: &ObjectiveConfig) -> Duration {
        self.runs(objective);
        self.runs[&format!("{objective:?}")].1
    }

    fn accuracy(&mut self, objective: &ObjectiveConfig) -> f64 {
        mean(
            &self
                .runs(objective)
                .iter()
                .map(|r| r.accuracy())
                .collect::<Vec<_>>(),
        )
    }

    fn isotropy(&mut self, objective: &ObjectiveConfig) -> f64 {
        mean(
            &self
                .runs(objective)
                .iter()
                .map(|r| r.target_isotropy)
                .collect::<Vec<_>>(),
        )
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn random_encoder(rng: &mut Rng) -> EncoderConfig {
    EncoderConfig {
        tokenizer: Tokenizer {
            vocab_size: 8 + rng.below(10),
            lowercase: true,
        },
        d_emb: 2 + rng.below(3),
        d_hidden: 2 + rng.below(4),
        d_out: 2 + rng.below(3),
        dropout: [0.0, 0.1, 0.3][rng.below(3)],
        batchnorm: rng.bernoulli(0.5),
        output_activation: if rng.bernoulli(0.5) {
            OutputActivation::Tanh
        } else {
            OutputActivation::Linear
        },
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut objectives = vec![
        ("ce", ObjectiveConfig::ce_only()),
        ("cl", ObjectiveConfig::cl()),
        ("cor", ObjectiveConfig::cor()),
        ("l2", ObjectiveConfig::l2(1e-2)),
        ("cl+cor", ObjectiveConfig::cl_cor()),
    ];
    for v in CovVariant::ALL {
        objectives.push(("cov", ObjectiveConfig::cov(v)));
    }
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for (k, (_, cfg)) in objectives.iter().enumerate() {
        for trial in 0..20u64 {
            let mut rng = Rng::derive(0xacce, 100 * k as u64 + trial);
            let enc = random_encoder(&mut rng);
            let classes = 2 + rng.below(3);
            let mut params = ModelParams::init(&enc, classes, &mut rng).unwrap();
            // Biases start at exactly zero, so a row whose hidden units are
            // all dropped encodes to the zero vector, where row normalization
            // is not differentiable. Trained parameters never sit there.
            let mut flat = params.flatten_trainable();
            flat.iter_mut().for_each(|w| *w += 0.1 * rng.normal());
            params.assign_trainable(&flat).unwrap();
            let n = 4 + rng.below(5);
            let vocab = enc.tokenizer.vocab_size;
            let batch = Batch {
                seqs: (0..n)
                    .map(|_| {
                        (0..1 + rng.below(5))
                            .map(|_| rng.below(vocab) as u32)
                            .collect()
                    })
                    .collect(),
                labels: (0..n).map(|_| rng.below(classes)).collect(),
            };
            let out = joint_loss_and_grads(&batch, &params, cfg, &mut Rng::new(trial), &ZeroClock)
                .unwrap();
            let analytic: Vec<f64> = out
                .grads
                .iter()
                .flat_map(|g| g.as_slice().to_vec())
                .collect();
            let numeric = finite_diff_grad(
                |p| Ok(joint_loss(&batch, p, cfg, &mut Rng::new(trial))?.total),
                &params,
                1e-5,
            )
            .unwrap();
            worst = worst.max(compare_gradients(&analytic, &numeric, 1e-5).max_rel_error);
            checks += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 60.0,
        format!(
            "{checks} checks over {} objectives, max relative error {worst:.2e}, {secs:.1} s",
            objectives.len()
        ),
    )
}

/// Isotropy computed independently: nalgebra eigenvectors of the centred
/// Gram matrix and a direct sum of exponentials.
fn brute_force_isotropy(v: &Matrix) -> f64 {
    let (n, d) = v.shape();
    let m = nalgebra::DMatrix::from_fn(n, d, |r, c| v[(r, c)]);
    let means = m.row_mean();
    let centered = nalgebra::DMatrix::from_fn(n, d, |r, c| m[(r, c)] - means[c]);
    let eig = nalgebra::SymmetricEigen::new(centered.transpose() * &centered);
    let mut zs = Vec::new();
    for k in 0..d {
        let c = eig.eigenvectors.column(k);
        for sign in [1.0, -1.0] {
            zs.push(
                (0..n)
                    .map(|i| (sign * centered.row(i).dot(&c.transpose())).exp())
                    .sum::<f64>(),
            );
        }
    }
    let lo = zs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    lo / hi
}

fn isotropy_oracle() -> Outcome {
    let sym = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]);
    let sym_err = (geometry::isotropy(&sym).unwrap() - 1.0).abs();
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let d = 2 + rng.below(15);
        let n = d + 1 + rng.below(64 - d);
        let scales: Vec<f64> = (0..d).map(|_| 0.2 + 1.5 * rng.uniform()).collect();
        let v = Matrix::from_fn(n, d, |_, c| scales[c] * rng.normal());
        worst = worst.max((geometry::isotropy(&v).unwrap() - brute_force_isotropy(&v)).abs());
    }
    outcome(
        sym_err <= 1e-9 && worst <= 1e-9,
        format!("symmetric 4-point error {sym_err:.1e}; max deviation from brute force over 50 matrices {worst:.1e}"),
    )
}

fn whitening() -> Outcome {
    let mut rng = Rng::new(7);
    let stds: Vec<f64> = (0..16).map(|c| 10f64.powf(c as f64 / 15.0)).collect();
    let v = Matrix::from_fn(512, 16, |_, c| stds[c] * rng.normal());
    let start = Instant::now();
    let map = geometry::fit_whitening(&v).unwrap();
    let w = geometry::apply_whitening(&map, &v).unwrap();
    let after = geometry::isotropy(&w).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let cov = geometry::covariance(&w).unwrap();
    let off = (0..16)
        .flat_map(|r| (0..16).filter(move |&c| c != r).map(move |c| (r, c)))
        .map(|(r, c)| cov[(r, c)].abs())
        .fold(0.0, f64::max);
    outcome(
        after >= 0.999 && off <= 1e-8 && secs < 1.0,
        format!(
            "isotropy {:.4} -> {after:.4} (needs >= 0.999), max |off-diagonal covariance| {off:.1e}, {secs:.3} s",
            geometry::isotropy(&v).unwrap()
        ),
    )
}

fn ce_reduces_isotropy(b: &mut Bench) -> Outcome {
    let runs = b.runs(&ObjectiveConfig::ce_only());
    let reduced = runs
        .iter()
        .filter(|r| r.target_isotropy < r.initial_isotropy)
        .count();
    let pairs: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3}->{:.3}", r.initial_isotropy, r.target_isotropy))
        .collect();
    outcome(
        reduced >= 4,
        format!("reduced in {reduced}/5 seeds: {}", pairs.join(", ")),
    )
}

fn regularizers_raise_isotropy(b: &mut Bench) -> Outcome {
    let ce = b.isotropy(&ObjectiveConfig::ce_only());
    let cor = b.isotropy(&ObjectiveConfig::cor());
    let cl = b.isotropy(&ObjectiveConfig::cl());
    outcome(
        cor > ce && cl > ce,
        format!("mean target isotropy: ce {ce:.3}, cor {cor:.3}, cl {cl:.3}"),
    )
}

fn main_result(b: &mut Bench) -> Outcome {
    let objectives = [
        ObjectiveConfig::ce_only(),
        ObjectiveConfig::cl(),
        ObjectiveConfig::cor(),
        ObjectiveConfig::cl_cor(),
    ];
    let [ce, cl, cor, both] = objectives.clone().map(|o| b.accuracy(&o));
    let secs: f64 = objectives.iter().map(|o| b.elapsed(o).as_secs_f64()).sum();
    let pass = cl >= ce && cor >= ce && both >= ce && both >= cl.max(cor) - 0.005 && secs <= 600.0;
    outcome(
        pass,
        format!(
            "ce {}, cl {}, cor {}, cl+cor {}; 20 trainings in {secs:.0} s",
            pct(ce),
            pct(cl),
            pct(cor),
            pct(both)
        ),
    )
}

fn lambda_sweep(b: &mut Bench) -> Outcome {
    let lambdas = [0.0, 0.04, 0.16, 0.64, 2.56, 10.24];
    let mut rows = Vec::new();
    for &l in &lambdas {
        let cfg = if l == 0.0 {
            ObjectiveConfig::ce_only()
        } else {
            ObjectiveConfig::cor().with_lambda(l)
        };
        rows.push((l, b.isotropy(&cfg), b.accuracy(&cfg)));
    }
    let monotone = rows.windows(2).all(|w| w[1].1 > w[0].1);
    let best_interior = rows[1..rows.len() - 1]
        .iter()
        .map(|r| r.2)
        .fold(0.0, f64::max);
    let extreme = rows[rows.len() - 1].2;
    let table: Vec<String> = rows
        .iter()
        .map(|(l, iso, acc)| format!("{l}: {iso:.3}/{}", pct(*acc)))
        .collect();
    outcome(
        monotone && extreme <= best_interior - 0.01,
        format!("lambda: isotropy/accuracy {}", table.join(", ")),
    )
}

fn cov_variants(b: &mut Bench) -> Outcome {
    let cor = b.accuracy(&ObjectiveConfig::cor());
    let mut pass = true;
    let mut parts = vec![format!("cor {}", pct(cor))];
    for v in CovVariant::ALL {
        let acc = b.accuracy(&ObjectiveConfig::cov(v));
        pass &= acc <= cor;
        parts.push(format!("cov({}) {}", v.name(), pct(acc)));
    }
    outcome(pass, parts.join(", "))
}

fn l2_baseline(b: &mut Bench) -> Outcome {
    let cor = b.accuracy(&ObjectiveConfig::cor());
    let mut best = (0.0, f64::NEG_INFINITY);
    let mut parts = Vec::new();
    for w in [1e-5, 1e-4, 1e-3, 1e-2, 1e-1] {
        let acc = b.accuracy(&ObjectiveConfig::l2(w));
        parts.push(format!("{w:e} {}", pct(acc)));
        if acc > best.1 {
            best = (w, acc);
        }
    }
    outcome(
        best.1 < cor,
        format!(
            "best l2 weight {:e} at {} vs cor {}; {}",
            best.0,
            pct(best.1),
            pct(cor),
            parts.join(", ")
        ),
    )
}

fn cli(args: &[&str]) {
    let mut full = vec!["isolab"];
    full.extend_from_slice(args);
    let code = isolab::cli::run(full);
    assert_eq!(code, 0, "isolab {}", args.join(" "));
}

/// Every file under `dir` except timing measurements, keyed by name.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path
                .file_name()
                .unwrap()
                .to_string_lossy()
                .starts_with("timing")
            {
                let key = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    fs::write(
        p("train.json"),
        r#"{"max_steps": 60, "objective": {"use_cl": true, "use_cor": true}}"#,
    )
    .unwrap();
    fs::write(
        p("sweep.json"),
        r#"{"max_steps": 30, "objective": {"use_cor": true}}"#,
    )
    .unwrap();
    let commands: Vec<Vec<String>> = vec![
        vec!["synth".into(), "--out".into(), p("corpus.jsonl")],
        vec![
            "pretrain".into(),
            "--config".into(),
            p("train.json"),
            "--data".into(),
            p("corpus.jsonl"),
            "--out".into(),
            p("run"),
        ],
        vec![
            "eval".into(),
            "--checkpoint".into(),
            p("run/model.ckpt"),
            "--data".into(),
            p("corpus.jsonl"),
            "--episodes".into(),
            "100".into(),
            "--out".into(),
            p("report.json"),
        ],
        vec![
            "isotropy".into(),
            "--checkpoint".into(),
            p("run/model.ckpt"),
            "--data".into(),
            p("corpus.jsonl"),
            "--per-domain".into(),
            "--dump".into(),
            p("target.emb"),
            "--out".into(),
            p("iso.json"),
        ],
        vec![
            "whiten".into(),
            "--embeddings".into(),
            p("target.emb"),
            "--out".into(),
            p("white.emb"),
        ],
        vec![
            "sweep".into(),
            "--config".into(),
            p("sweep.json"),
            "--param".into(),
            "lambda".into(),
            "--values".into(),
            "0.04,0.4".into(),
            "--seeds".into(),
            "1,2".into(),
            "--episodes".into(),
            "50".into(),
            "--data".into(),
            p("corpus.jsonl"),
            "--out".into(),
            p("sweep"),
        ],
        vec![
            "report".into(),
            "--checkpoint".into(),
            p("run/model.ckpt"),
            "--data".into(),
            p("corpus.jsonl"),
            "--out".into(),
            p("report"),
        ],
    ];
    let run_all = || {
        for c in &commands {
            let args: Vec<&str> = c.iter().map(String::as_str).collect();
            cli(&args);
        }
        snapshot(dir.path())
    };
    let first = run_all();
    let second = run_all();
    let differing: Vec<&String> = first
        .keys()
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();
    outcome(
        differing.is_empty() && first.len() == second.len(),
        format!(
            "{} commands run twice, {} output files compared, differing: {differing:?}",
            commands.len(),
            first.len()
        ),
    )
}

fn cor_descent() -> Outcome {
    let mut rng = Rng::new(11);
    let mix = Matrix::from_fn(8, 8, |r, c| if r <= c { 1.0 } else { 0.0 });
    let mut h = rng.normal_matrix(64, 8, 1.0).matmul(&mix).unwrap();
    let start = cor_reg(&h).unwrap();
    let cfg = AdamConfig {
        learning_rate: 0.05,
        ..AdamConfig::default()
    };
    let mut state = AdamState::for_params(&[&h]);
    for _ in 0..500 {
        let mut tape = Tape::new();
        let v = tape.leaf(&h);
        let loss = cor_reg_var(&mut tape, v, false).unwrap();
        let g = tape.backward(loss).unwrap().get(v).unwrap().clone();
        adam_step(&mut [&mut h], &[g], &[false], &mut state, &cfg).unwrap();
    }
    let end = objectives::cor_reg(&h).unwrap();
    outcome(
        end < 0.05,
        format!("||corr - I||_F {start:.3} -> {end:.4} in 500 Adam steps"),
    )
}

type Criterion = Box<dyn FnOnce(&mut Bench) -> Outcome>;

fn main() {
    let mut bench = Bench::new();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("gradient suite", Box::new(|_| gradient_suite())),
        ("isotropy oracle", Box::new(|_| isotropy_oracle())),
        ("whitening", Box::new(|_| whitening())),
        (
            "CE pre-training lowers target isotropy",
            Box::new(ce_reduces_isotropy),
        ),
        (
            "regularizers raise isotropy",
            Box::new(regularizers_raise_isotropy),
        ),
        ("main result", Box::new(main_result)),
        ("lambda sweep", Box::new(lambda_sweep)),
        ("covariance variants below Cor-Reg", Box::new(cov_variants)),
        ("L2 below Cor-Reg", Box::new(l2_baseline)),
        ("determinism", Box::new(|_| determinism())),
        ("Cor-Reg descent", Box::new(|_| cor_descent())),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let o = check(&mut bench);
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {verdict}  {name}: {}", i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    println!(
        "acceptance: {} passed, {} failed {failed:?}",
        11 - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
