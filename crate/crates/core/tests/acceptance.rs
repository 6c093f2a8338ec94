//! Acceptance checks. Each prints one `PASS`/`FAIL` line to stderr (visible
//! without `--nocapture`). Criteria 5-7 share one model trained with
//! `configs/desk.toml`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rfm_edit::data::instruction::NULL;
use rfm_edit::data::{
    build_triplets, filter_triplet, generate_dataset, proxy_similarity, Catalog, Dataset, Envelope,
    EventSpec, Scene, Split, Task,
};
use rfm_edit::flow::{
    fm_loss, interpolate, sample, sample_with_attention, target_velocity, SamplerConfig,
    VelocityField,
};
use rfm_edit::metrics::{
    box_attention_contrast, frechet_distance, inception_score, paired_kl, sign_test_pvalue,
    token_attention_map, GaussianStats, ReferenceClassifier,
};
use rfm_edit::model::params::Bound;
use rfm_edit::model::{
    AttentionRecord, InstructionEmbedding, ModelConfig, ParamId, ParamStore, VelocityModel,
};
use rfm_edit::optim::{AdamHyper, OptimizerState};
use rfm_edit::train::{
    ablate_tstart, train_loop, train_step, validate, Checkpoint, ModelEditor, OracleEditor,
    RunConfig,
};
use rfm_edit::{rng, Tape, Tensor, Var};

const DESK: &str = include_str!("../../../configs/desk.toml");

fn report(id: &str, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {id} {verdict} {name}: {detail}"
    );
}

// ---- 1 -------------------------------------------------------------------

struct ConstantField(Tensor);

impl VelocityField for ConstantField {
    fn velocity(
        &self,
        _x: &Tensor,
        _source: &Tensor,
        _t: f64,
        _instruction: &InstructionEmbedding,
        _record: bool,
    ) -> rfm_edit::Result<(Tensor, Vec<AttentionRecord>)> {
        Ok((self.0.clone(), Vec::new()))
    }

    fn null_instruction(&self) -> rfm_edit::Result<InstructionEmbedding> {
        InstructionEmbedding::new(vec![NULL], Tensor::zeros(&[1, 1]))
    }
}

#[test]
fn criterion_1_solver_exactness() {
    let start = Instant::now();
    let shape = [64, 16];
    let seed = 21;
    let x0 = rng::standard_normal(&shape, &mut rng::stream(5, &[]));
    let eps = rng::sampler_noise(&shape, seed);
    let field = ConstantField(x0.zip_map(&eps, "v", |a, e| a - e).unwrap());
    let instr = field.null_instruction().unwrap();
    let mut worst: f64 = 0.0;
    for num_steps in [1, 10, 200] {
        let cfg = SamplerConfig {
            sigma_min: 0.0,
            t_start: 0.0,
            num_steps,
            guidance_weight: 3.0,
        };
        let out = sample(&field, &Tensor::zeros(&shape), &instr, &cfg, seed).unwrap();
        worst = worst.max(out.max_abs_diff(&x0).unwrap());
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-9 && elapsed < Duration::from_secs(1);
    report(
        "1",
        "solver exactness",
        pass,
        format!("max |x - x0| = {worst:.2e} over steps 1/10/200 in {elapsed:.2?}"),
    );
    assert!(pass);
}

// ---- 2 -------------------------------------------------------------------

fn objective(model: &VelocityModel, p: &Bound, tape: &mut Tape) -> Var {
    let cfg = model.config();
    let shape = [cfg.frames, cfg.bins];
    let mut r = rng::stream(2, &[]);
    let cases: [(&[usize], f64); 2] = [(&[3, 4, 5, 6], 0.3), (&[NULL], 0.8)];
    let mut total = None;
    for (tokens, t) in cases {
        let x0 = rng::standard_normal(&shape, &mut r);
        let eps = rng::standard_normal(&shape, &mut r);
        let x_t = tape.constant(interpolate(&x0, &eps, t, 1e-4).unwrap());
        let target = tape.constant(target_velocity(&x0, &eps, 1e-4).unwrap());
        let source = tape.constant(rng::standard_normal(&shape, &mut r));
        let text = model.encode_var(tape, p, tokens).unwrap();
        let (v, _) = model.forward(tape, p, x_t, source, t, text, false).unwrap();
        let l = fm_loss(tape, v, target).unwrap();
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l).unwrap(),
        });
    }
    total.unwrap()
}

fn loss_at(model: &VelocityModel, store: &ParamStore) -> f64 {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let l = objective(model, &p, &mut tape);
    tape.value(l)[0]
}

/// Largest relative error over 20 random trainable coordinates, and how many
/// of them had a non-negligible gradient.
fn gradient_check(config: ModelConfig) -> (f64, usize) {
    let mut model = VelocityModel::new(config).unwrap();
    let mut r = rng::stream(77, &[]);
    let zero_init: Vec<ParamId> = model
        .params()
        .iter()
        .filter(|(_, p)| p.name.starts_with("out.") || p.name.ends_with("lora_up"))
        .map(|(id, _)| id)
        .collect();
    for id in zero_init {
        for x in model.params_mut().value_mut(id).data_mut() {
            *x = r.gen_range(-0.3..0.3);
        }
    }
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let loss = objective(&model, &p, &mut tape);
    tape.backward(loss).unwrap();
    let grads = model.params().collect_grads(&tape, &p);

    let trainable = model.params().trainable();
    let sizes: Vec<usize> = trainable
        .iter()
        .map(|&id| model.params().get(id).numel())
        .collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut material = 0;
    for _ in 0..20 {
        let (mut which, mut k) = (0, r.gen_range(0..total));
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let id = trainable[which];
        let mut plus = model.params().clone();
        plus.value_mut(id).data_mut()[k] += h;
        let mut minus = model.params().clone();
        minus.value_mut(id).data_mut()[k] -= h;
        let numeric = (loss_at(&model, &plus) - loss_at(&model, &minus)) / (2.0 * h);
        let analytic = grads[which][k];
        if analytic.abs() > 1e-6 {
            material += 1;
        }
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    (worst, material)
}

#[test]
fn criterion_2_gradient_fidelity() {
    let start = Instant::now();
    let (mini, mini_n) = gradient_check(ModelConfig::miniature());
    let (desk, desk_n) = gradient_check(ModelConfig::default());
    let worst = mini.max(desk);
    let elapsed = start.elapsed();
    let pass = worst < 1e-3 && elapsed < Duration::from_secs(30);
    report(
        "2",
        "gradient fidelity",
        pass,
        format!(
            "max relative error {mini:.2e} (miniature, {mini_n}/20 with |g| > 1e-6), {desk:.2e} (desk, {desk_n}/20) in {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

// ---- 3 -------------------------------------------------------------------

fn gaussian(mean: &[f64], cov: &[f64]) -> GaussianStats {
    let d = mean.len();
    GaussianStats::new(
        Tensor::from_vec(mean.to_vec()).unwrap(),
        Tensor::new(vec![d, d], cov.to_vec()).unwrap(),
        100,
    )
    .unwrap()
}

#[test]
fn criterion_3_metric_oracles() {
    let cov = [2.0, 0.5, 0.5, 1.0];
    let a = gaussian(&[1.0, 2.0], &cov);
    let identical = frechet_distance(&a, &a).unwrap();
    let shifted = frechet_distance(&a, &gaussian(&[4.0, 6.0], &cov)).unwrap();
    let one_d = frechet_distance(&gaussian(&[0.0], &[1.0]), &gaussian(&[1.0], &[4.0])).unwrap();

    let classes = 8;
    let one_hot = |k: usize| {
        let mut v = vec![0.0; classes];
        v[k] = 1.0;
        Tensor::from_vec(v).unwrap()
    };
    let is_one = inception_score(&vec![one_hot(2); 10]).unwrap();
    let is_c = inception_score(&(0..classes).map(one_hot).collect::<Vec<_>>()).unwrap();
    let logits: Vec<Tensor> = (0..5)
        .map(|s| rng::standard_normal(&[classes], &mut rng::stream(s, &[])))
        .collect();
    let kl = paired_kl(&logits, &logits).unwrap();

    let pass = identical.abs() < 1e-8
        && (shifted - 25.0).abs() < 1e-8
        && (one_d - 2.0).abs() < 1e-8
        && (is_one - 1.0).abs() < 1e-12
        && (is_c - classes as f64).abs() < 1e-12
        && kl == 0.0;
    report(
        "3",
        "metric oracles",
        pass,
        format!(
            "FD identical {identical:.1e}, shift {shifted:.12}, 1-D {one_d:.12}; IS {is_one:.12} / {is_c:.12} (C = {classes}); KL(p,p) {kl}"
        ),
    );
    assert!(pass);
}

// ---- 4 -------------------------------------------------------------------

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn criterion_4_dataset_recipe() {
    let cfg = RunConfig::from_toml(DESK).unwrap();
    let catalog = Catalog::standard(cfg.data.bins).unwrap();
    let det = &cfg.data.detector;
    let (frames, bins) = (cfg.data.frames, cfg.data.bins);
    let x = Scene::new(
        vec![EventSpec::of_type(&catalog, 3, 4, 24, 0.9, Envelope::Rect).unwrap()],
        &catalog,
        frames,
        bins,
    )
    .unwrap();
    let a = EventSpec::of_type(&catalog, 0, 30, 20, 0.8, Envelope::Rect).unwrap();
    let b = EventSpec::of_type(&catalog, 5, 10, 30, 0.7, Envelope::Rect).unwrap();
    let six = build_triplets(&x, 0, &a, &b, &catalog).unwrap();
    let xa = x.with_event(a, &catalog).unwrap();
    let xb = x.with_event(b, &catalog).unwrap();
    let expected: [(Task, &Scene, &Scene); 6] = [
        (Task::Add, &x, &xa),
        (Task::Add, &x, &xb),
        (Task::Remove, &xa, &x),
        (Task::Remove, &xb, &x),
        (Task::Replace, &xa, &xb),
        (Task::Replace, &xb, &xa),
    ];
    let recipe = six.len() == 6
        && six.iter().zip(&expected).all(|(t, (task, i, e))| {
            t.task == *task
                && t.input == **i
                && t.edited == **e
                && t.target_caption_events == e.caption_events()
        });

    let strict = six.iter().all(|t| {
        let s_in = proxy_similarity(
            t.input.spectrogram(),
            &t.input.caption_events(),
            &catalog,
            det,
        );
        let s_out = proxy_similarity(
            t.edited.spectrogram(),
            &t.target_caption_events,
            &catalog,
            det,
        );
        let s = s_in.min(s_out);
        !filter_triplet(t, s, &catalog, det) && filter_triplet(t, s - 1e-9, &catalog, det)
    });

    let start = Instant::now();
    let data = generate_dataset(&cfg.data, 0).unwrap();
    let gen_time = start.elapsed();
    let again = generate_dataset(&cfg.data, 0).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    data.save(d1.path()).unwrap();
    again.save(d2.path()).unwrap();
    let identical = files(d1.path()) == files(d2.path());

    let mut total = 0;
    let mut local = 0;
    let mut above = 0;
    for s in Split::ALL {
        for t in data.split(s) {
            total += 1;
            let mask = t.edit_mask();
            let pairs = t
                .input
                .spectrogram()
                .data()
                .iter()
                .zip(t.edited.spectrogram().data());
            if mask.iter().any(|m| *m) && pairs.zip(&mask).all(|((i, e), m)| *m || i == e) {
                local += 1;
            }
            let s_in = proxy_similarity(
                t.input.spectrogram(),
                &t.input.caption_events(),
                &catalog,
                det,
            );
            let s_out = proxy_similarity(
                t.edited.spectrogram(),
                &t.target_caption_events,
                &catalog,
                det,
            );
            if s_in > cfg.data.similarity_threshold && s_out > cfg.data.similarity_threshold {
                above += 1;
            }
        }
    }
    let pass = recipe
        && strict
        && identical
        && local == total
        && above == total
        && data.train.len() == cfg.data.train_size
        && gen_time < Duration::from_secs(60);
    report(
        "4",
        "dataset recipe",
        pass,
        format!(
            "six triplets {recipe}, strict filter {strict}, byte-identical regeneration {identical}, locality {local}/{total}, \
             above threshold {above}/{total}, {} train triplets in {gen_time:.2?}",
            data.train.len()
        ),
    );
    assert!(pass);
}

// ---- 8 -------------------------------------------------------------------

#[test]
fn criterion_8_overfit_single_triplet() {
    let cfg = RunConfig::from_toml(DESK).unwrap();
    let data_cfg = rfm_edit::data::DataConfig {
        train_size: 6,
        val_size: 6,
        test_size: 6,
        ..cfg.data.clone()
    };
    let data = generate_dataset(&data_cfg, 0).unwrap();
    let item = data.train.iter().find(|t| t.task == Task::Replace).unwrap();
    let mut train = cfg.train.clone();
    train.p_uncond = 0.0;
    let mut model = VelocityModel::new(cfg.model.clone()).unwrap();
    let mut opt = OptimizerState::new(model.params(), AdamHyper::default());
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    for step in 0..500 {
        let mut r = rng::stream(3, &[]);
        last = train_step(&mut model, &[item], &mut opt, &train, &mut r).unwrap();
        if step == 0 {
            first = last;
        }
    }
    let pass = last < 1e-3;
    report(
        "8",
        "overfit sanity",
        pass,
        format!("loss {first:.4} -> {last:.2e} after 500 steps"),
    );
    assert!(pass);
}

// ---- 5-7: one trained model ------------------------------------------------

struct Trained {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    data: Dataset,
    model: VelocityModel,
    best_val: f64,
    history: Vec<f64>,
    train_time: Duration,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = RunConfig::from_toml(DESK).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(&cfg.data, cfg.train.seed).unwrap();
        data.save(&dir.path().join(&cfg.train.dataset_dir)).unwrap();
        let start = Instant::now();
        let outcome = train_loop(&cfg, dir.path(), false, &mut |_| {}).unwrap();
        let train_time = start.elapsed();
        let model = Checkpoint::load_for(&outcome.best_path, &cfg.model)
            .unwrap()
            .model;
        Trained {
            _dir: dir,
            best_val: outcome.best_score,
            history: outcome.history.iter().map(|r| r.val_clap).collect(),
            cfg,
            data,
            model,
            train_time,
        }
    })
}

#[test]
fn criterion_5_learning_signal() {
    let tr = trained();
    let (cfg, data) = (&tr.cfg, &tr.data);
    let s = cfg.train.validation_sampler();
    let det = &cfg.data.detector;
    let all = data.val.len();
    let untrained = VelocityModel::new(cfg.model.clone()).unwrap();
    let floor = validate(
        &ModelEditor(&untrained),
        &data.val,
        &data.catalog,
        det,
        &s,
        all,
        0,
    )
    .unwrap();
    let trained_val = validate(
        &ModelEditor(&tr.model),
        &data.val,
        &data.catalog,
        det,
        &s,
        all,
        0,
    )
    .unwrap();
    let oracle = validate(&OracleEditor, &data.val, &data.catalog, det, &s, all, 0).unwrap();
    let subset_floor = validate(
        &ModelEditor(&untrained),
        &data.val,
        &data.catalog,
        det,
        &s,
        cfg.train.validation_subset_size,
        cfg.train.seed,
    )
    .unwrap();
    let h = &tr.history;
    let bookkeeping = h.len() == cfg.train.epochs
        && tr.best_val == h.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        && tr.best_val >= h[0]
        && h.get(9).is_none_or(|v| *v >= subset_floor + 0.2);
    let pass = floor < 0.2
        && trained_val >= 0.5
        && oracle == 1.0
        && bookkeeping
        && tr.train_time <= Duration::from_secs(30 * 60);
    report(
        "5",
        "learning signal",
        pass,
        format!(
            "validation proxy-CLAP {floor:.4} untrained -> {trained_val:.4} trained over all {all} items \
             (selection subset: floor {subset_floor:.4}, epoch 1 {:.4}, epoch 10 {:.4}, best {:.4}); \
             ground truth {oracle}; {} triplets, {} epochs in {:.1?}",
            h[0],
            h.get(9).copied().unwrap_or(f64::NAN),
            tr.best_val,
            data.train.len(),
            h.len(),
            tr.train_time
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_tstart_direction() {
    let tr = trained();
    let (cfg, data) = (&tr.cfg, &tr.data);
    let classifier = ReferenceClassifier::train(
        &data.catalog,
        cfg.data.frames,
        cfg.data.bins,
        cfg.eval.classifier_seed,
        &cfg.eval.classifier,
    )
    .unwrap();
    let base = SamplerConfig {
        num_steps: cfg.eval.ablation_steps,
        ..cfg.train.sampler
    };
    let values = [0.0, 0.001, 0.01, 0.1];
    let seeds = cfg.eval.ablation_seeds;
    let ab = ablate_tstart(
        &ModelEditor(&tr.model),
        &data.test,
        &classifier,
        &data.catalog,
        &cfg.data.detector,
        &base,
        &values,
        seeds,
        cfg.eval.ablation_items,
        cfg.train.seed,
        &cfg.config_hash(),
    )
    .unwrap();
    let paired = |a: &[f64], b: &[f64]| {
        let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
        let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
        (wins, losses, sign_test_pvalue(wins, losses))
    };

    let means: Vec<f64> = ab.rows.iter().map(|r| r.l2_to_input).collect();
    let mut l2_pass = seeds >= 20 && means.windows(2).all(|w| w[1] < w[0]);
    let mut l2_detail = Vec::new();
    for w in values.windows(2) {
        let (wins, _, p) = paired(
            &ab.seed_values(w[0], |r| r.l2_to_input),
            &ab.seed_values(w[1], |r| r.l2_to_input),
        );
        l2_pass &= p < 0.05;
        l2_detail.push(format!(
            "{}->{}: {wins}/{seeds} down, p={p:.1e}",
            w[0], w[1]
        ));
    }
    let mean_text: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
    report(
        "6a",
        "L2-to-input decreases with t_start",
        l2_pass,
        format!(
            "means [{}] over {seeds} seeds; {}",
            mean_text.join(", "),
            l2_detail.join("; ")
        ),
    );

    let clap = |t: f64| {
        ab.rows
            .iter()
            .find(|r| r.t_start == t)
            .unwrap()
            .report
            .clap_mean
    };
    let (wins, losses, p) = paired(
        &ab.seed_values(0.01, |r| r.clap),
        &ab.seed_values(0.1, |r| r.clap),
    );
    let clap_pass = clap(0.01) > clap(0.1) && p < 0.05;
    report(
        "6b",
        "proxy-CLAP(0.01) > proxy-CLAP(0.1)",
        clap_pass,
        format!(
            "{:.4} vs {:.4}; per-seed {wins} wins, {losses} losses, {} ties, sign test p={p:.3}",
            clap(0.01),
            clap(0.1),
            seeds - wins - losses
        ),
    );
    assert!(l2_pass);
}

#[test]
fn criterion_7_localization() {
    let tr = trained();
    let (cfg, data) = (&tr.cfg, &tr.data);
    let (frames, bins) = (cfg.data.frames, cfg.data.bins);
    let s = cfg.train.validation_sampler();
    let held_out: Vec<_> = data.test.iter().filter(|t| t.task != Task::Add).collect();
    let mut inside_wins = 0;
    for (i, item) in held_out.iter().enumerate() {
        let e = tr
            .model
            .encode_instruction(&item.instruction_tokens)
            .unwrap();
        let trace =
            sample_with_attention(&tr.model, item.input.spectrogram(), &e, &s, i as u64).unwrap();
        let map = token_attention_map(&trace.attention, 1, frames, bins).unwrap();
        let (inside, outside) = box_attention_contrast(&map, &item.edit_mask()).unwrap();
        if inside > outside {
            inside_wins += 1;
        }
    }
    let frac = inside_wins as f64 / held_out.len() as f64;
    let pass = frac >= 0.7;
    report(
        "7",
        "attention localization",
        pass,
        format!("edited-event token attends more inside the edit box on {inside_wins}/{} remove/replace test triplets ({:.1}%)", held_out.len(), 100.0 * frac),
    );
    assert!(pass);
}

// ---- 9 -------------------------------------------------------------------

fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut c = RunConfig::from_toml(DESK).unwrap();
    c.data.train_size = 60;
    c.data.val_size = 12;
    c.data.test_size = 12;
    c.train.epochs = 2;
    c.train.batch_size = 8;
    c.train.validation_subset_size = 6;
    c.train.validation_steps = 4;
    c.eval.subset_size = 12;
    c.eval.ablation_seeds = 2;
    c.eval.ablation_items = 3;
    c.eval.ablation_steps = 4;
    c.eval.classifier.steps = 120;
    let config = dir.join("run.toml");
    fs::write(&config, c.to_toml().unwrap()).unwrap();
    let reports = dir.join("reports");
    let eval = reports.join("eval.json");
    let ablation = reports.join("ablate.csv");
    let steps: [Vec<&str>; 4] = [
        vec!["gen-data"],
        vec!["train"],
        vec!["eval", "--steps", "6", "--out", eval.to_str().unwrap()],
        vec!["ablate-tstart", "--out", ablation.to_str().unwrap()],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_rfm-edit"))
            .arg("--workdir")
            .arg(dir)
            .arg("--config")
            .arg(&config)
            .args(&args)
            .env("NO_COLOR", "1")
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&reports)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.push((
        "metrics.csv".into(),
        fs::read(dir.join(&c.train.checkpoint_dir).join("metrics.csv")).unwrap(),
    ));
    files.sort();
    files
}

#[test]
fn criterion_9_reproducibility() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    let pass = first.len() >= 3 && first == second;
    report(
        "9",
        "reproducibility",
        pass,
        format!(
            "two seeded gen-data/train/eval/ablate runs; identical: {}",
            names.join(", ")
        ),
    );
    assert!(pass);
}
