//! Small end-to-end runs: stage contracts, evaluation plumbing and the CLI.

use std::process::Command;
use std::sync::OnceLock;

use vqlti::atmosphere::{split_storms, synth_dataset, timestep_count, DatasetSplit, Storm};
use vqlti::cvqvae::Cvqvae;
use vqlti::harness::{
    evaluate, export_latents, frozen_fingerprint, load_stage1, load_stage2, pretrain, stage1_checkpoint,
    stage2_checkpoint, train_forecast, EvalReport, PredictionRow, RunConfig, Stage1, Stage2,
};
use vqlti::Error;

const TINY: &[(&str, &str)] = &[
    ("grid", "8"),
    ("channels", "6"),
    ("patch", "2"),
    ("feature_width", "3"),
    ("token_dim", "6"),
    ("latent_dim", "4"),
    ("codebook_size", "8"),
    ("attn_width", "6"),
    ("mlp_hidden", "8"),
    ("storms", "12"),
    ("min_life", "12"),
    ("max_life", "16"),
    ("n", "2"),
    ("m", "3"),
    ("batch_size", "16"),
    ("epochs_pretrain", "2"),
    ("epochs_forecast", "2"),
    ("lr", "0.001"),
];

fn tiny() -> RunConfig {
    let mut c = RunConfig::desk();
    for (k, v) in TINY {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

struct Run {
    cfg: RunConfig,
    storms: Vec<Storm>,
    split: DatasetSplit,
    s1: Stage1,
    fp: u32,
    s2: Stage2,
}

fn run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = tiny();
        let storms = synth_dataset(cfg.storms, &cfg.synth_params(), 1).unwrap();
        let split = split_storms(&storms);
        let s1 = pretrain(&cfg, &storms, &split, false).unwrap();
        let fp = stage1_checkpoint(&s1).unwrap().fingerprint().unwrap();
        let s2 = train_forecast(&cfg, &s1, fp, &storms, &split).unwrap();
        Run { cfg, storms, split, s1, fp, s2 }
    })
}

fn report(r: &Run, s2: &Stage2) -> EvalReport {
    let c = &r.cfg;
    evaluate(&s2.model, &r.storms, &r.split.test, r.split.fingerprint, c.n, c.m, &c.degrade_params(), c.seed, 8)
        .unwrap()
}

#[test]
fn second_stage_leaves_encoding_side_untouched() {
    let r = run();
    let (before, after) = (&r.s1.vae.params, &r.s2.model.vae.params);
    let mut decoder_change = 0.0;
    for ((name, a), (_, b)) in before.iter().zip(after.iter()) {
        if Cvqvae::is_encoding_param(name) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{name} moved during the second stage");
        } else {
            decoder_change += a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>();
        }
    }
    assert!(decoder_change > 0.0);
    assert_eq!(frozen_fingerprint(&r.s1.vae), frozen_fingerprint(&r.s2.model.vae));
    assert_eq!(r.s2.stage1_fingerprint, r.fp);
}

#[test]
fn report_covers_every_lead_and_reaggregates_from_csv() {
    let r = run();
    let rep = report(r, &r.s2);
    let leads: Vec<usize> = rep.leads.iter().map(|l| l.lead).collect();
    assert_eq!(leads, (1..=r.cfg.m).collect::<Vec<_>>());
    assert!(rep.windows > 0);
    assert_eq!(rep.rows.len(), rep.windows * r.cfg.m);

    // recompute per-lead wind error from the written predictions
    let csv = rep.rows_csv();
    for l in &rep.leads {
        let errs: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|line| line.split(',').map(String::from).collect::<Vec<_>>())
            .filter(|f| f[2].parse::<usize>().unwrap() == l.lead)
            .map(|f| (f[3].parse::<f64>().unwrap() - f[5].parse::<f64>().unwrap()).abs())
            .collect();
        let knots = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!((knots * 0.5144 - l.msw_mae).abs() < 1e-9, "lead {}", l.lead);
    }
}

#[test]
fn persistence_against_itself_has_zero_skill() {
    let rows: Vec<PredictionRow> = report(run(), &run().s2)
        .rows
        .into_iter()
        .map(|r| PredictionRow { pred_msw: r.persist_msw, pred_mslp: r.persist_mslp, ..r })
        .collect();
    let rep = EvalReport::from_rows(rows, run().cfg.m).unwrap();
    for l in &rep.leads {
        assert_eq!(l.msw_mae, l.persistence_msw_mae);
        assert!(l.msw_skill.is_none_or(|s| s == 0.0));
        assert!(l.mslp_skill.is_none_or(|s| s == 0.0));
    }
}

#[test]
fn disabling_potential_intensity_never_computes_it() {
    let r = run();
    let mut cfg = r.cfg.clone();
    cfg.use_pi = false;
    cfg.epochs_forecast = 1;
    let s2 = train_forecast(&cfg, &r.s1, r.fp, &r.storms, &r.split).unwrap();
    report(r, &s2);
    assert_eq!(s2.model.forecaster.pi_calls(), 0);
}

#[test]
fn checkpoints_refuse_the_wrong_stage_and_split() {
    let r = run();
    let ck1 = stage1_checkpoint(&r.s1).unwrap();
    let ck2 = stage2_checkpoint(&r.s2).unwrap();
    assert!(matches!(load_stage2(&ck1), Err(Error::Config(_))));
    assert!(matches!(load_stage1(&ck2), Err(Error::Config(_))));

    let c = &r.cfg;
    let wrong = r.split.fingerprint ^ 1;
    let res = evaluate(&r.s2.model, &r.storms, &r.split.test, wrong, c.n, c.m, &c.degrade_params(), c.seed, 8);
    assert!(res.is_err());

    let mut other = c.clone();
    other.latent_dim = 6;
    assert!(matches!(train_forecast(&other, &r.s1, r.fp, &r.storms, &r.split), Err(Error::Config(_))));
}

#[test]
fn latent_export_has_one_row_per_timestep() {
    let r = run();
    let csv = export_latents(&r.s1.vae, &r.s1.norm, &r.storms).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 3 + r.cfg.latent_dim + 2);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), timestep_count(&r.storms));
    for row in rows {
        let index: usize = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!(index < r.cfg.codebook_size);
    }
}

fn cli(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vqlti"));
    cmd.arg("--out").arg(dir).env("RUST_LOG", "warn");
    for (k, v) in TINY {
        cmd.arg("--set").arg(format!("{k}={v}"));
    }
    cmd.args(args).output().unwrap()
}

#[test]
fn command_line_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let ok = |out: std::process::Output| {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };

    ok(cli(d, &["gen-data"]));
    ok(cli(d, &["pretrain", "--data", &p("dataset.tcds")]));
    ok(cli(d, &["train", "--data", &p("dataset.tcds"), "--checkpoint", &p("stage1.vqlt")]));
    ok(cli(d, &["evaluate", "--data", &p("dataset.tcds"), "--checkpoint", &p("stage2.vqlt")]));
    ok(cli(
        d,
        &["forecast", "--data", &p("dataset.tcds"), "--checkpoint", &p("stage1.vqlt"), "--checkpoint", &p("stage2.vqlt"), "--horizon", "5"],
    ));
    ok(cli(d, &["pi", "--data", &p("dataset.tcds")]));
    ok(cli(d, &["export-latents", "--data", &p("dataset.tcds"), "--checkpoint", &p("stage1.vqlt")]));
    for f in ["config.resolved", "leads.csv", "predictions.csv", "table.txt", "forecast.csv", "pi.csv", "latents.csv"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let leads = std::fs::read_to_string(d.join("leads.csv")).unwrap();
    assert_eq!(leads.lines().count(), 1 + 3);
    let forecast = std::fs::read_to_string(d.join("forecast.csv")).unwrap();
    assert!(forecast.starts_with("storm_id,init_step,lead_step,msw_knots,msw_ms,mslp_hpa\n"));
    assert!(forecast.lines().skip(1).all(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap() <= 5));

    // a second stage from a different first stage is refused
    ok(cli(&d.join("other"), &["--seed", "3", "pretrain", "--data", &p("dataset.tcds")]));
    let out = cli(
        d,
        &["forecast", "--data", &p("dataset.tcds"), "--checkpoint", &p("other/stage1.vqlt"), "--checkpoint", &p("stage2.vqlt")],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn command_line_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = d.join("bad.cfg");
    std::fs::write(&bad, "lr = minus one\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vqlti"))
        .args(["--out", d.to_str().unwrap(), "--config", bad.to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = cli(d, &["--set", "heads=5", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(d.join("junk.tcds"), b"not a dataset").unwrap();
    let out = cli(d, &["pi", "--data", d.join("junk.tcds").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}
