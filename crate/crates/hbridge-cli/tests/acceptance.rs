//! Acceptance suite: every release gate in one serialized run, one
//! PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture`. Criteria execute
//! in order inside a single test so heavyweight runs never contend for
//! cores, and a late failure still reports everything before it.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use hbridge_core::analysis::{drift_profile, nmse};
use hbridge_core::checkpoint::{install_params, load_checkpoint, save_checkpoint, RngState};
use hbridge_core::config::{BridgeSpec, Config, ExpertSpec, FusionMode, TrainSpec, VitSpec};
use hbridge_core::data::make_dataset;
use hbridge_core::eval::decode_accuracy;
use hbridge_core::flowmatch::{euler_sample, FlowBatch};
use hbridge_core::model::{ModelBundle, Phase};
use hbridge_core::params::{LayoutBuilder, Params};
use hbridge_core::rng::Rng;
use hbridge_core::srt::SrtRefs;
use hbridge_core::trainer::{finite_diff_check, GradCheckOptions, Trainer};

fn workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(4)
}

fn expert(n_layers: usize, d: usize, d_ff: usize, vocab: Option<usize>, max_seq: usize) -> ExpertSpec {
    ExpertSpec {
        n_layers,
        d_model: d,
        n_heads: 4,
        d_ff,
        vocab_size: vocab,
        max_seq,
    }
}

fn config(
    und: ExpertSpec,
    gen: ExpertSpec,
    skip: (usize, usize),
    decoupled: bool,
    steps: u64,
    batch: usize,
    seed: u64,
    n_srt: usize,
) -> Config {
    Config {
        understanding: und,
        generative: gen,
        bridge: BridgeSpec {
            skip_front: skip.0,
            skip_back: skip.1,
            fusion_mode: FusionMode::Deep,
            decoupled,
        },
        train: TrainSpec {
            learning_rate: 1e-4,
            steps,
            batch_size: batch,
            grad_accum: 1,
            seed,
            srt_enabled: true,
            n_srt_tokens: n_srt,
        },
        vit: VitSpec::default(),
    }
}

/// u 4 layers/d=32, g 6 layers/d=48, 2 bridged layers, 4 SRT tokens.
fn tiny_config(steps: u64, batch: usize, seed: u64) -> Config {
    config(
        expert(4, 32, 64, Some(16), 8),
        expert(6, 48, 96, None, 20),
        (1, 1),
        false,
        steps,
        batch,
        seed,
        4,
    )
}

fn out_root() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hbridge-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("create acceptance dir");
    dir
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient fidelity on the stated tiny config.
// ---------------------------------------------------------------------------
fn criterion_1() -> String {
    let t0 = Instant::now();
    let cfg = tiny_config(1, 4, 7);
    let (bundle, params) = ModelBundle::new(&cfg).expect("bundle");
    assert_eq!(bundle.plan.bridged.len(), 2, "tiny config has 2 bridged layers");
    let report = finite_diff_check(
        &bundle,
        &params,
        &GradCheckOptions {
            coords_per_role: 16,
            eps: 1e-5,
            seed: 17,
            roles: None,
        },
    )
    .expect("finite diff check");
    let elapsed = t0.elapsed().as_secs_f64();

    assert!(report.total_coords >= 64, "only {} coords", report.total_coords);
    for need in ["aligner", "srt_bank", "gen_block", "head"] {
        assert!(
            report.roles.iter().any(|r| r.role == need),
            "role {need} not covered"
        );
    }
    assert!(
        report.max_rel_err <= 1e-3,
        "max rel err {} > 1e-3",
        report.max_rel_err
    );
    assert!(elapsed < 120.0, "took {elapsed:.1}s, budget 120s");
    format!(
        "max rel err {:.3e} over {} coords in {:.1}s",
        report.max_rel_err, report.total_coords, elapsed
    )
}

// ---------------------------------------------------------------------------
// Criterion 2: frozen invariance after 500 bridged steps.
// ---------------------------------------------------------------------------
fn criterion_2() -> String {
    let cfg = tiny_config(500, 8, 11);
    let (bundle, params) = ModelBundle::new(&cfg).expect("bundle");
    let und_bits: Vec<Vec<u64>> = bundle.und.all_segs.iter().map(|id| params.seg_bits(*id)).collect();
    let vit_bits: Vec<Vec<u64>> = bundle.vit.all_segs.iter().map(|id| params.seg_bits(*id)).collect();

    let mut trainer = Trainer::new(&bundle, params, Phase::BridgeTrain, workers()).expect("trainer");
    trainer.run_steps(500, None).expect("train 500");

    for (id, before) in bundle.und.all_segs.iter().zip(&und_bits) {
        assert_eq!(&trainer.params.seg_bits(*id), before, "understanding tensor changed");
    }
    for (id, before) in bundle.vit.all_segs.iter().zip(&vit_bits) {
        assert_eq!(&trainer.params.seg_bits(*id), before, "target-encoder tensor changed");
    }
    format!(
        "{} understanding + {} encoder tensors bit-identical after 500 steps",
        bundle.und.all_segs.len(),
        bundle.vit.all_segs.len()
    )
}

// ---------------------------------------------------------------------------
// Criterion 3: decoupling oracle — bridge disabled equals a standalone
// generative expert, bit for bit in strict mode.
// ---------------------------------------------------------------------------
fn criterion_3() -> String {
    let bridged_cfg = tiny_config(1, 4, 13);
    let mut standalone_cfg = bridged_cfg.clone();
    standalone_cfg.bridge = BridgeSpec {
        skip_front: 2,
        skip_back: 2,
        fusion_mode: FusionMode::Deep,
        decoupled: true,
    };

    // Per-group init streams give both bundles identical expert weights.
    let (b_bridged, p_bridged) = ModelBundle::new(&bridged_cfg).expect("bundle");
    let (b_alone, p_alone) = ModelBundle::new(&standalone_cfg).expect("bundle");

    let mut rng = Rng::seeded(5);
    let mut x_t = vec![0.0; 16 * 48];
    rng.fill_normal(&mut x_t, 1.0);

    // Bridged model with its bridge fully disabled.
    let empty_plan = hbridge_core::BridgePlan {
        projector_depth: b_bridged.plan.projector_depth,
        aligned_count: b_bridged.plan.aligned_count,
        bridged: vec![],
    };
    let ctx_disabled = hbridge_core::gen::BridgeCtx {
        plan: &empty_plan,
        aligners: &b_bridged.aligners,
        n_heads_und: b_bridged.und.n_heads,
        d_und: b_bridged.und.d,
    };
    let (out_disabled, _) = b_bridged
        .gen
        .forward(&p_bridged, &ctx_disabled, None, &b_bridged.srt, &x_t, 0.37, None, false)
        .expect("disabled forward");

    let (out_alone, _) = b_alone
        .gen
        .forward(&p_alone, &b_alone.bridge_ctx(), None, &b_alone.srt, &x_t, 0.37, None, false)
        .expect("standalone forward");

    let max_abs = out_disabled
        .velocity
        .iter()
        .zip(&out_alone.velocity)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_abs <= 1e-6, "max abs diff {max_abs}");
    assert_eq!(out_disabled.velocity, out_alone.velocity, "strict-mode bit equality");
    assert_eq!(out_disabled.srt_out, out_alone.srt_out);
    format!("bit-identical outputs (max abs diff {max_abs:.1e})")
}

// ---------------------------------------------------------------------------
// Criterion 4: drift-analyzer exactness plus the informative micro-model.
// ---------------------------------------------------------------------------
fn criterion_4() -> String {
    // nmse unit cases.
    let b = vec![0.5, -1.5, 2.0];
    assert_eq!(nmse(&b.clone(), &b).unwrap(), 0.0);
    assert_eq!(nmse(&[0.0, 0.0, 0.0], &b).unwrap(), 1.0);

    // Micro-model: two aligned layers, only layer 1 bridged.
    let cfg = config(
        expert(2, 16, 32, Some(16), 8),
        expert(3, 16, 32, None, 20),
        (1, 0),
        false,
        200,
        8,
        3,
        4,
    );
    let (bundle, params) = ModelBundle::new(&cfg).expect("bundle");
    let mut trainer = Trainer::new(&bundle, params, Phase::BridgeTrain, workers()).expect("trainer");
    trainer.run_steps(200, None).expect("train micro-model");

    // Through a checkpoint, so the analyzer sees what any run would see.
    let dir = out_root();
    let ckpt = dir.join("c4.hbrd");
    let (batch, flow) = trainer.rng_states();
    save_checkpoint(&ckpt, &cfg, &trainer.params, None, RngState { batch, flow }, 200).expect("save");
    let loaded = load_checkpoint(&ckpt).expect("load");
    let (bundle2, mut params2) = ModelBundle::new(&loaded.header.config).expect("rebuild");
    install_params(&loaded, &bundle2, &mut params2).expect("install");

    let eval = make_dataset(24, 99);
    let report = drift_profile(&bundle2, &params2, &eval, 5).expect("drift");
    assert_eq!(report.rows.len(), 2);
    let non_bridged = &report.rows[0];
    assert!(!non_bridged.bridged);
    assert_eq!(non_bridged.nmse, 0.0, "non-bridged nmse must be exactly 0");
    assert_eq!(non_bridged.loss_delta, 0.0, "non-bridged loss delta must be exactly 0");
    let informative = &report.rows[1];
    assert!(informative.bridged);
    assert!(informative.nmse > 0.0, "informative bridge nmse 0");
    assert!(informative.loss_delta > 0.0, "informative bridge loss delta {}", informative.loss_delta);
    format!(
        "non-bridged rows exactly zero; informative bridge nmse {:.3e}, loss delta {:+.3e}",
        informative.nmse, informative.loss_delta
    )
}

// ---------------------------------------------------------------------------
// Criterion 5: flow-matching exactness.
// ---------------------------------------------------------------------------
fn criterion_5() -> String {
    let mut rng = Rng::seeded(2);
    let mut x1 = vec![0.0; 32];
    let mut x0 = vec![0.0; 32];
    rng.fill_normal(&mut x1, 1.0);
    rng.fill_normal(&mut x0, 1.0);
    assert_eq!(FlowBatch::with_draws(x1.clone(), x0.clone(), 0.0).x_t, x0);
    assert_eq!(FlowBatch::with_draws(x1.clone(), x0.clone(), 1.0).x_t, x1);

    // Constant oracle field: exact recovery for any step count.
    for steps in [1usize, 5, 64] {
        let mut peek = Rng::seeded(31);
        let mut noise = vec![0.0; 32];
        peek.fill_normal(&mut noise, 1.0);
        let x1c = x1.clone();
        let noise_c = noise.clone();
        let out = euler_sample(
            move |_, _| Ok(x1c.iter().zip(&noise_c).map(|(c, n)| c - n).collect()),
            32,
            steps,
            &mut Rng::seeded(31),
        )
        .expect("sample");
        let worst = out
            .iter()
            .zip(&x1)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-12, "steps {steps}: {worst}");
    }

    // Linear-in-t field: halving the step size cuts the error by >= 1.8x.
    let a = 2.5f64;
    let mut errs = Vec::new();
    for steps in [4usize, 8, 16, 32] {
        let mut peek = Rng::seeded(77);
        let mut noise = vec![0.0; 1];
        peek.fill_normal(&mut noise, 1.0);
        let out = euler_sample(|_, t| Ok(vec![a * t]), 1, steps, &mut Rng::seeded(77)).unwrap();
        errs.push((out[0] - (noise[0] + a / 2.0)).abs());
    }
    let mut min_ratio = f64::INFINITY;
    for w in errs.windows(2) {
        min_ratio = min_ratio.min(w[0] / w[1]);
        assert!(w[0] / w[1] >= 1.8, "ratio {} below 1.8", w[0] / w[1]);
    }
    format!("endpoints exact; oracle recovery exact; min step-halving ratio {min_ratio:.2}")
}

// ---------------------------------------------------------------------------
// Criterion 6: SRT loss bounds and the three exact cases.
// ---------------------------------------------------------------------------
fn criterion_6() -> String {
    let mut lb = LayoutBuilder::new();
    let srt = SrtRefs::build(&mut lb, 4, 16, 16);
    let mut params = Params::zeros(lb.finish());
    // Identity projection so projected rows can be steered exactly.
    {
        let w = params.seg_mut(srt.proj_w);
        for i in 0..16 {
            w[i * 16 + i] = 1.0;
        }
    }
    let mut srt_out = vec![0.0; 4 * 16];
    for i in 0..4 {
        srt_out[i * 16 + i] = 3.0;
    }
    let mut target = vec![0.0; 4 * 16];
    for i in 0..4 {
        target[i * 16 + i] = 0.7;
    }
    let identical = srt.loss(&params, &srt_out, &target).unwrap();
    assert!(identical.abs() <= 1e-6, "identical {identical}");
    for i in 0..4 {
        target[i * 16 + i] = 0.0;
        target[i * 16 + i + 8] = 2.0;
    }
    let orthogonal = srt.loss(&params, &srt_out, &target).unwrap();
    assert!((orthogonal - 1.0).abs() <= 1e-6, "orthogonal {orthogonal}");
    for i in 0..4 {
        target[i * 16 + i + 8] = 0.0;
        target[i * 16 + i] = -5.0;
    }
    let antipodal = srt.loss(&params, &srt_out, &target).unwrap();
    assert!((antipodal - 2.0).abs() <= 1e-6, "antipodal {antipodal}");

    let mut rng = Rng::seeded(8);
    for _ in 0..200 {
        let mut o = vec![0.0; 4 * 16];
        let mut t = vec![0.0; 4 * 16];
        rng.fill_normal(&mut o, 2.0);
        rng.fill_normal(&mut t, 2.0);
        let l = srt.loss(&params, &o, &t).unwrap();
        assert!((0.0..=2.0).contains(&l), "loss {l} out of bounds");
    }
    format!("cases 0/1/2 exact within 1e-6 ({identical:.1e}, {orthogonal:.3}, {antipodal:.3}); 200 random losses in [0,2]")
}

// ---------------------------------------------------------------------------
// Criterion 7: conditional learning on the 128-class task.
// ---------------------------------------------------------------------------
fn criterion_7() -> String {
    let threads = workers();
    let budget_secs = 900.0 * (4.0 / threads as f64).max(1.0);
    let t0 = Instant::now();

    let und = expert(6, 64, 128, Some(16), 8);
    let gen = expert(8, 64, 128, None, 32);
    let bridged_cfg = config(und.clone(), gen.clone(), (1, 1), false, 3000, 32, 7, 16);
    let decoupled_cfg = config(und, gen, (3, 3), true, 3000, 32, 7, 16);

    // Bridged arm: pretrain the understanding expert briefly so the frozen
    // prior is nontrivial, then bridge-train.
    let (bundle, params) = ModelBundle::new(&bridged_cfg).expect("bundle");
    let mut pre = Trainer::new(&bundle, params, Phase::PretrainUnderstanding, threads).expect("pretrainer");
    pre.run_steps(300, None).expect("und pretrain");
    let mut trainer = Trainer::new(&bundle, pre.params, Phase::BridgeTrain, threads).expect("trainer");
    let hist = trainer.run_steps(3000, None).expect("bridged train");
    let bridged_eval = decode_accuracy(&bundle, &trainer.params, 256, 32, 901, threads).expect("eval");

    // Decoupled arm under the same budget.
    let (bundle_d, params_d) = ModelBundle::new(&decoupled_cfg).expect("bundle");
    let mut trainer_d = Trainer::new(&bundle_d, params_d, Phase::BridgeTrain, threads).expect("trainer");
    let hist_d = trainer_d.run_steps(3000, None).expect("decoupled train");
    let decoupled_eval = decode_accuracy(&bundle_d, &trainer_d.params, 256, 32, 901, threads).expect("eval");

    let elapsed = t0.elapsed().as_secs_f64();
    let fm_last = hist.last().unwrap().fm_loss.unwrap();
    let fm_last_d = hist_d.last().unwrap().fm_loss.unwrap();

    assert!(
        bridged_eval.accuracy >= 0.60,
        "bridged accuracy {:.3} below 0.60",
        bridged_eval.accuracy
    );
    assert!(
        decoupled_eval.accuracy <= 0.05,
        "decoupled accuracy {:.3} above 0.05",
        decoupled_eval.accuracy
    );
    assert!(
        elapsed <= budget_secs,
        "runtime {elapsed:.0}s over budget {budget_secs:.0}s ({threads} worker threads; stated budget is 15 min at 4 cores)"
    );
    format!(
        "bridged {}/{} = {:.1}%, decoupled {}/{} = {:.1}%, fm {:.3} vs {:.3}, {:.0}s at {} threads (budget {:.0}s)",
        bridged_eval.hits,
        bridged_eval.trials,
        100.0 * bridged_eval.accuracy,
        decoupled_eval.hits,
        decoupled_eval.trials,
        100.0 * decoupled_eval.accuracy,
        fm_last,
        fm_last_d,
        elapsed,
        threads,
        budget_secs
    )
}

// ---------------------------------------------------------------------------
// Criterion 8: initialization trend over 3 seeds.
// ---------------------------------------------------------------------------
fn criterion_8() -> String {
    let threads = workers();
    let budget = 600u64;
    let window = |hist: &[hbridge_core::trainer::StepMetrics], frac: f64| -> f64 {
        let mid = (budget as f64 * frac) as usize;
        let lo = mid.saturating_sub(6);
        let hi = (mid + 6).min(hist.len());
        let slice = &hist[lo..hi];
        slice.iter().map(|m| m.fm_loss.unwrap()).sum::<f64>() / slice.len() as f64
    };

    let mut wins = 0;
    let mut detail = String::new();
    for seed in [21u64, 22, 23] {
        let cfg = config(
            expert(4, 32, 64, Some(16), 8),
            expert(6, 48, 96, None, 20),
            (1, 1),
            false,
            budget,
            16,
            seed,
            4,
        );

        // Arm A: 300-step unconditional generative pretrain, then bridge.
        let (bundle, params) = ModelBundle::new(&cfg).expect("bundle");
        let mut pre = Trainer::new(&bundle, params, Phase::PretrainGenerative, threads).expect("pre");
        pre.run_steps(300, None).expect("gen pretrain");
        let mut warm = Trainer::new(&bundle, pre.params, Phase::BridgeTrain, threads).expect("warm");
        let hist_warm = warm.run_steps(budget, None).expect("warm train");

        // Arm B: random init, same seed and draws.
        let (bundle_b, params_b) = ModelBundle::new(&cfg).expect("bundle");
        let mut cold = Trainer::new(&bundle_b, params_b, Phase::BridgeTrain, threads).expect("cold");
        let hist_cold = cold.run_steps(budget, None).expect("cold train");

        let (w25, c25) = (window(&hist_warm, 0.25), window(&hist_cold, 0.25));
        let (w50, c50) = (window(&hist_warm, 0.50), window(&hist_cold, 0.50));
        let win = w25 < c25 && w50 < c50;
        wins += usize::from(win);
        detail.push_str(&format!(
            "seed {seed}: 25% {w25:.3} vs {c25:.3}, 50% {w50:.3} vs {c50:.3} -> {}; ",
            if win { "pretrain wins" } else { "no win" }
        ));
    }
    assert!(wins >= 2, "pretrained init won only {wins}/3 seeds: {detail}");
    format!("pretrained init lower at 25% and 50% in {wins}/3 seeds — {detail}")
}

// ---------------------------------------------------------------------------
// Criterion 9: CLI ablation sweep with consolidated CSV.
// ---------------------------------------------------------------------------
fn criterion_9() -> String {
    let bin = env!("CARGO_BIN_EXE_hbridge");
    let dir = out_root().join("sweep");
    std::fs::create_dir_all(&dir).expect("sweep dir");
    let threads = workers();

    let base_cfg = config(
        expert(6, 32, 64, Some(16), 8),
        expert(8, 48, 96, None, 20),
        (0, 0),
        false,
        500,
        16,
        31,
        4,
    );
    let cfg_path = dir.join("sweep_base.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&base_cfg).unwrap()).unwrap();

    // Tab.5-style M/N sweep, Tab.6-style SRT toggle, Tab.7-style fusion mode.
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("m0n0", vec![]),
        ("m1n1", vec!["bridge.skip_front=1".into(), "bridge.skip_back=1".into()]),
        ("m2n2", vec!["bridge.skip_front=2".into(), "bridge.skip_back=2".into()]),
        (
            "decoupled",
            vec![
                "bridge.skip_front=3".into(),
                "bridge.skip_back=3".into(),
                "bridge.decoupled=true".into(),
            ],
        ),
        (
            "srt_off",
            vec![
                "bridge.skip_front=1".into(),
                "bridge.skip_back=1".into(),
                "train.srt_enabled=false".into(),
            ],
        ),
        (
            "shallow",
            vec![
                "bridge.skip_front=1".into(),
                "bridge.skip_back=1".into(),
                "bridge.fusion_mode=\"shallow\"".into(),
            ],
        ),
    ];

    let mut finals: Vec<(String, f64)> = Vec::new();
    for (label, overrides) in &runs {
        let out = dir.join(label);
        let mut cmd = Command::new(bin);
        cmd.arg("train")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .env("HBRIDGE_THREADS", threads.to_string());
        for o in overrides {
            cmd.arg("--set").arg(o);
        }
        let status = cmd.status().expect("spawn hbridge train");
        assert!(status.success(), "run {label} failed: {status}");

        let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).expect("metrics");
        let fms: Vec<f64> = metrics
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).expect("metrics line");
                v["fm_loss"].as_f64().expect("fm_loss")
            })
            .collect();
        let tail = &fms[fms.len() - 50..];
        finals.push((label.to_string(), tail.iter().sum::<f64>() / tail.len() as f64));
    }

    let mut csv = String::from("run,final_fm_loss\n");
    for (label, fm) in &finals {
        csv.push_str(&format!("{label},{fm}\n"));
    }
    let csv_path = dir.join("consolidated.csv");
    std::fs::write(&csv_path, &csv).expect("write consolidated csv");

    let baseline = finals
        .iter()
        .find(|(l, _)| l == "decoupled")
        .expect("decoupled run present")
        .1;
    for (label, fm) in &finals {
        if label != "decoupled" {
            assert!(
                *fm < baseline,
                "{label} final fm {fm:.4} not below decoupled baseline {baseline:.4}"
            );
        }
    }
    format!(
        "6 runs converged; all bridged finals below decoupled {:.3}; consolidated CSV at {}",
        baseline,
        csv_path.display()
    )
}

// ---------------------------------------------------------------------------
// Criterion 10: round-trips and strict-mode determinism.
// ---------------------------------------------------------------------------
fn criterion_10() -> String {
    let bin = env!("CARGO_BIN_EXE_hbridge");
    let dir = out_root().join("c10");
    std::fs::create_dir_all(&dir).expect("dir");

    // Dataset regeneration byte-identical.
    for sub in ["d1", "d2"] {
        let status = Command::new(bin)
            .args(["gen-data", "--n", "256", "--seed", "41", "--out"])
            .arg(dir.join(sub))
            .status()
            .expect("gen-data");
        assert!(status.success());
    }
    let d1 = std::fs::read(dir.join("d1/dataset.hbds")).unwrap();
    let d2 = std::fs::read(dir.join("d2/dataset.hbds")).unwrap();
    assert_eq!(d1, d2, "dataset bytes differ");

    // Two strict-mode (single-thread) training runs: identical logs except
    // wall time.
    let cfg = tiny_config(40, 4, 19);
    let cfg_path = dir.join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    for sub in ["r1", "r2"] {
        let status = Command::new(bin)
            .args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(dir.join(sub))
            .env("HBRIDGE_THREADS", "1")
            .status()
            .expect("train");
        assert!(status.success());
    }
    let strip_wall = |text: &str| -> Vec<serde_json::Value> {
        text.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };
    let m1 = strip_wall(&std::fs::read_to_string(dir.join("r1/metrics.jsonl")).unwrap());
    let m2 = strip_wall(&std::fs::read_to_string(dir.join("r2/metrics.jsonl")).unwrap());
    assert_eq!(m1.len(), 40);
    assert_eq!(m1, m2, "metric logs differ beyond wall time");

    // Checkpoint save -> load -> save byte round-trip.
    let ckpt = dir.join("r1/checkpoint.hbrd");
    let loaded = load_checkpoint(&ckpt).expect("load");
    let (bundle, mut params) = ModelBundle::new(&loaded.header.config).expect("bundle");
    install_params(&loaded, &bundle, &mut params).expect("install");
    let mut opt = hbridge_core::trainer::AdamW::new(&params, loaded.header.config.train.learning_rate);
    hbridge_core::checkpoint::install_moments(&loaded, &params, &mut opt).expect("moments");
    let resaved = dir.join("resaved.hbrd");
    save_checkpoint(
        &resaved,
        &loaded.header.config,
        &params,
        Some(&opt),
        loaded.header.rng.clone(),
        loaded.header.trained_steps,
    )
    .expect("resave");
    let b1 = std::fs::read(&ckpt).unwrap();
    let b2 = std::fs::read(&resaved).unwrap();
    assert_eq!(b1, b2, "checkpoint bytes differ after reload");

    "dataset regeneration, checkpoint byte round-trip, and strict-mode log equality all hold".into()
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let criteria: Vec<(&str, fn() -> String)> = vec![
        (" 1 gradient fidelity", criterion_1),
        (" 2 frozen invariance", criterion_2),
        (" 3 decoupling oracle", criterion_3),
        (" 4 drift-analyzer exactness", criterion_4),
        (" 5 flow-matching exactness", criterion_5),
        (" 6 srt loss bounds", criterion_6),
        (" 7 conditional learning", criterion_7),
        (" 8 initialization trend", criterion_8),
        (" 9 ablation sweep", criterion_9),
        ("10 round-trips and determinism", criterion_10),
    ];

    let only: Option<String> = std::env::var("HBRIDGE_ACCEPT_ONLY").ok();
    let mut failures = Vec::new();
    for (name, f) in criteria {
        if let Some(filter) = &only {
            if !name.trim_start().starts_with(filter.as_str()) {
                continue;
            }
        }
        let t0 = Instant::now();
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(detail) => {
                println!(
                    "criterion {name}: PASS ({:.1}s) — {detail}",
                    t0.elapsed().as_secs_f64()
                );
            }
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                println!(
                    "criterion {name}: FAIL ({:.1}s) — {msg}",
                    t0.elapsed().as_secs_f64()
                );
                failures.push(format!("{name}: {msg}"));
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}
