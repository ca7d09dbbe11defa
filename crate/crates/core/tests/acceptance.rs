//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Pass criterion numbers as arguments to run a subset.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::{cloud, oracle_density_coverage, ConstantPolicy};
use dsdp::baselines::{
    train_baseline, train_head, BaselineConfig, BaselineKind, HeadKind, IdmFixedPolicy,
    IdmStyleTable,
};
use dsdp::datasets::{
    generate_synthetic, group_by_vehicle, preprocess, PreprocessConfig, Split, SyntheticSpec,
    OBS_DIM,
};
use dsdp::eval::{
    build_scenarios, density_coverage, evaluate_crash, evaluate_f1, prior_style_accuracy,
    style_recovery, EvalConfig, LeaderMode,
};
use dsdp::par::Exec;
use dsdp::policy::{
    from_model, make_schedule, sample_chains, train_diffusion, train_policy, Conditioning,
    ContextSource, DiffusionData, DiffusionNet, DiffusionPolicy, PolicyConfig, SamplerKind,
    ScheduleConfig, POLICY_KIND,
};
use dsdp::seeding::{derive_seed, SimRng};
use dsdp::styles::{train_contrastive, train_prior, ContrastiveConfig, PriorConfig, StylePrior};
use dsdp::trafficsim::GRAVITY;
use numkit::gradcheck::{random_layer_case, LAYER_KINDS};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn split_for(n_drivers: usize, seed: u64) -> dsdp::Result<Split> {
    let data = generate_synthetic(&SyntheticSpec::four_styles(n_drivers, seed))?;
    let raw = group_by_vehicle(&data.records)?;
    preprocess(&raw, Some(&data.labels), &PreprocessConfig::default())
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed <= Duration::from_secs(budget_s)
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, "");
    let mut cases = 0;
    for (j, kind) in LAYER_KINDS.iter().enumerate() {
        for case in 0..100u64 {
            let mut rng = SimRng::seed_from_u64(derive_seed(j as u64, &format!("gradient/{case}")));
            let r = random_layer_case(kind, &mut rng, 1e-5)?;
            cases += 1;
            if r.max_rel_err > worst.0 {
                worst = (r.max_rel_err, kind);
            }
        }
    }
    let ok = worst.0 < 1e-4 && within(t0.elapsed(), 60);
    Ok((
        ok,
        format!(
            "{cases} cases over {} layer kinds, worst rel err {:.2e} ({})",
            LAYER_KINDS.len(),
            worst.0,
            worst.1
        ),
    ))
}

fn metric_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = SimRng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..500 {
        let dim = rng.random_range(1..=5);
        let k = rng.random_range(1..=5);
        let (n_real, n_fake, shift) = (
            rng.random_range(k + 1..=200),
            rng.random_range(1..=200),
            rng.random_range(-0.5..0.5),
        );
        let real = cloud(&mut rng, n_real, dim, 0.0);
        let fake = cloud(&mut rng, n_fake, dim, shift);
        if density_coverage(&real, &fake, k)? != oracle_density_coverage(&real, &fake, k) {
            mismatches += 1;
        }
    }
    let mut self_cover = true;
    for _ in 0..20 {
        let real = cloud(&mut rng, 100, 3, 0.0);
        self_cover &= density_coverage(&real, &real, 5)?.1 == 1.0;
    }
    let ok = mismatches == 0 && self_cover && within(t0.elapsed(), 60);
    Ok((
        ok,
        format!("{mismatches}/500 mismatches, fake == real coverage exactly 1: {self_cover}"),
    ))
}

fn ddpm_sanity() -> Outcome {
    let s = ScheduleConfig::default().build()?;
    let mut rng = SimRng::seed_from_u64(3);
    let n = 100_000;
    let a = to_model_space(0.8);
    let mut worst: f64 = 0.0;
    for t in [1, 5, 10, 25, 40, 50] {
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            xs.push(s.forward_noise(a, t, rng.sample(StandardNormal))?);
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (m, v) = (s.alpha_bar[t].sqrt() * a, 1.0 - s.alpha_bar[t]);
        // The mean is compared on the scale of the larger of |m| and the noise sd.
        worst = worst
            .max((mean - m).abs() / m.abs().max(v.sqrt()))
            .max((var - v).abs() / v);
    }
    let one = make_schedule(1, 1e-4, 0.02)?;
    let mut recon: f64 = 0.0;
    for _ in 0..1000 {
        let a: f64 = rng.random_range(-1.0..1.0);
        let eps: f64 = rng.sample(StandardNormal);
        let back = one.reverse_step(
            one.forward_noise(a, 1, eps)?,
            1,
            eps,
            rng.sample(StandardNormal),
        )?;
        recon = recon.max((back - a).abs());
    }
    let ok = worst <= 0.02 && recon < 1e-10;
    Ok((ok, format!("worst relative moment error {worst:.4} at 1e5 draws, t=1 reconstruction error {recon:.1e}")))
}

fn to_model_space(a: f64) -> f64 {
    2.0 * a - 1.0
}

fn bimodal_recovery() -> Outcome {
    let t0 = Instant::now();
    let n = 2000;
    let data = DiffusionData {
        obs: vec![[0.5; OBS_DIM]; n],
        actions: (0..n).map(|i| if i % 2 == 0 { 0.2 } else { 0.8 }).collect(),
        context: Vec::new(),
    };
    let cfg = PolicyConfig {
        epochs: 10,
        batch: 64,
        lr: 1e-3,
        ..Default::default()
    };
    let none = DiffusionData::default();
    let net = DiffusionNet::new(
        &cfg.diffusion(Conditioning::None),
        &mut SimRng::seed_from_u64(0),
    )?;
    let net = train_diffusion(net, &data, &none, &cfg, 0)?.into_best();
    let xs = sample_chains(
        &net,
        net.schedule(),
        &[0.5; OBS_DIM],
        &[],
        1000,
        0,
        &mut SimRng::seed_from_u64(1),
    )?;
    let share = |m: f64| {
        xs.iter()
            .filter(|&&x| (from_model(x).clamp(0.0, 1.0) - m).abs() <= 0.05)
            .count() as f64
            / xs.len() as f64
    };
    let (lo, hi) = (share(0.2), share(0.8));
    let (mse, _) = train_head(HeadKind::Mse, &data, &none, &cfg, 0)?;
    let point = mse.point_estimates(&[[0.5; OBS_DIM]])?[0];
    let ok = lo >= 0.25 && hi >= 0.25 && (point - 0.5).abs() <= 0.05 && within(t0.elapsed(), 300);
    Ok((ok, format!("diffusion mass {lo:.3} near 0.2 and {hi:.3} near 0.8, MSE output {point:.3} (mean 0.5)")))
}

fn style_recovery_check() -> Outcome {
    let t0 = Instant::now();
    let split = split_for(200, 0)?;
    let (repr, _) = train_contrastive(&split.train, &ContrastiveConfig::default(), 0)?;
    let (prior, _) = train_prior(&split.train, &repr, &PriorConfig::default(), 0)?;
    let rec = style_recovery(&repr, &split.test)?;
    let acc = prior_style_accuracy(&prior, &repr, &split.train, &split.test)?;
    let ok = rec.window_purity >= 0.8 && acc >= 0.7 && within(t0.elapsed(), 900);
    Ok((
        ok,
        format!(
            "purity {:.3} over {} codes, prior top-1 accuracy {acc:.3} (chance 0.25)",
            rec.window_purity, rec.distinct_codes
        ),
    ))
}

fn crash_protocol() -> Outcome {
    let t0 = Instant::now();
    let split = split_for(200, 0)?;
    let cfg = EvalConfig::default();
    let idm = IdmFixedPolicy::new(IdmStyleTable::bundled())?;
    let mut idm_pct = Vec::new();
    for (mode, seed) in [(LeaderMode::Idm, 1), (LeaderMode::Stopped, 2)] {
        let set = build_scenarios(&split.test, mode, cfg.crash_scenarios, true, &cfg, seed)?;
        idm_pct.push(evaluate_crash(&idm, &split.stats, &set, seed, Exec::Parallel)?.crash_pct);
    }
    let stopped = build_scenarios(
        &split.test,
        LeaderMode::Stopped,
        cfg.crash_scenarios,
        true,
        &cfg,
        3,
    )?;
    let floor = evaluate_crash(
        &ConstantPolicy(GRAVITY),
        &split.stats,
        &stopped,
        3,
        Exec::Parallel,
    )?
    .crash_pct;
    let ok = idm_pct.iter().all(|&p| p == 0.0) && floor == 100.0 && within(t0.elapsed(), 120);
    Ok((
        ok,
        format!(
            "IDM crash rate {:.1}% (IDM leader) and {:.1}% (stopped leader) over {} scenarios each, max acceleration {floor:.1}%",
            idm_pct[0], idm_pct[1], cfg.crash_scenarios
        ),
    ))
}

fn dsdp_benefit() -> Outcome {
    let t0 = Instant::now();
    let eval = EvalConfig::default();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let split = split_for(200, seed)?;
        let (repr, _) = train_contrastive(&split.train, &ContrastiveConfig::default(), seed)?;
        let (prior, _) = train_prior(&split.train, &repr, &PriorConfig::default(), seed)?;
        let net = train_policy(&split.train, &repr, &PolicyConfig::default(), seed)?.into_best();
        let context = ContextSource::Style {
            repr,
            prior: StylePrior::Learned(prior),
            temperature: 1.0,
        };
        let dsdp =
            DiffusionPolicy::new("dsdp", net, context, split.stats.clone(), SamplerKind::Ddpm)?;
        let (uncond, _) = train_baseline(
            BaselineKind::UncondDiffusionBc,
            &split.train,
            &BaselineConfig::default(),
            seed,
        )?;
        let uncond = uncond.policy(&split.stats, SamplerKind::Ddpm)?;
        let set = build_scenarios(
            &split.test,
            LeaderMode::Replay,
            eval.f1_scenarios,
            false,
            &eval,
            derive_seed(seed, "scenarios"),
        )?;
        let eval_seed = derive_seed(seed, "rollouts");
        let a = evaluate_f1(&dsdp, &split.stats, &set, eval.k, eval_seed, Exec::Parallel)?
            .f1
            .unwrap_or(0.0);
        let b = evaluate_f1(
            uncond.as_ref(),
            &split.stats,
            &set,
            eval.k,
            eval_seed,
            Exec::Parallel,
        )?
        .f1
        .unwrap_or(0.0);
        wins += (a >= b) as usize;
        lines.push(format!("seed {seed}: {a:.3} vs {b:.3}"));
        println!(
            "    {} ({:.0} s)",
            lines.last().unwrap(),
            t0.elapsed().as_secs_f64()
        );
    }
    let ok = wins >= 4 && within(t0.elapsed(), 1800);
    Ok((
        ok,
        format!(
            "DSDP F1 >= unconditional in {wins}/5 seeds [{}]",
            lines.join("; ")
        ),
    ))
}

fn digest(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs every stage at desk-toy scale and hashes each serialized artifact.
fn pipeline_hashes(exec: Exec) -> dsdp::Result<BTreeMap<String, String>> {
    let mut h = BTreeMap::new();
    let spec = SyntheticSpec::four_styles(24, 9);
    let data = generate_synthetic(&spec)?;
    h.insert("records".into(), digest(serde_json::to_vec(&data.records)?));
    let raw = group_by_vehicle(&data.records)?;
    let split = preprocess(&raw, Some(&data.labels), &PreprocessConfig::default())?;
    h.insert("train".into(), digest(serde_json::to_vec(&split.train)?));
    h.insert("test".into(), digest(serde_json::to_vec(&split.test)?));
    h.insert("stats".into(), digest(split.stats.to_json()?));
    let ccfg = ContrastiveConfig {
        passes: 2,
        ..Default::default()
    };
    let (repr, _) = train_contrastive(&split.train, &ccfg, 1)?;
    h.insert(
        "style".into(),
        digest(repr.to_checkpoint("fp", 1)?.to_json()?),
    );
    let (prior, _) = train_prior(
        &split.train,
        &repr,
        &PriorConfig {
            epochs: 1,
            ..Default::default()
        },
        2,
    )?;
    h.insert(
        "prior".into(),
        digest(prior.to_checkpoint("fp", 2)?.to_json()?),
    );
    let pcfg = PolicyConfig {
        epochs: 2,
        checkpoint_every: 1,
        max_batches_per_epoch: Some(3),
        val_examples: 64,
        ..Default::default()
    };
    let trained = train_policy(&split.train, &repr, &pcfg, 3)?;
    h.insert(
        "policy".into(),
        digest(
            trained
                .best_net()
                .to_checkpoint(POLICY_KIND, "fp", 3, &trained.log)?
                .to_json()?,
        ),
    );
    let mut bcfg = BaselineConfig {
        policy: pcfg.clone(),
        ..Default::default()
    };
    bcfg.idm.budget = 50;
    bcfg.ebm.negatives = 8;
    bcfg.ebm.candidates = 32;
    for kind in BaselineKind::ALL {
        let (b, _) = train_baseline(kind, &split.train, &bcfg, 4)?;
        h.insert(
            format!("baseline/{kind}"),
            digest(b.to_checkpoint("fp", 4)?.to_json()?),
        );
    }
    let context = ContextSource::Style {
        repr,
        prior: StylePrior::Learned(prior),
        temperature: 1.0,
    };
    let policy = DiffusionPolicy::new(
        "dsdp",
        trained.into_best(),
        context,
        split.stats.clone(),
        SamplerKind::Ddpm,
    )?;
    let eval = EvalConfig {
        crash_steps: 40,
        ..Default::default()
    };
    let f1_set = build_scenarios(&split.test, LeaderMode::Replay, 4, false, &eval, 5)?;
    h.insert(
        "eval/f1".into(),
        digest(evaluate_f1(&policy, &split.stats, &f1_set, eval.k, 5, exec)?.to_json()?),
    );
    let crash_set = build_scenarios(&split.test, LeaderMode::Stopped, 8, true, &eval, 6)?;
    h.insert(
        "eval/crash".into(),
        digest(evaluate_crash(&policy, &split.stats, &crash_set, 6, exec)?.to_json()?),
    );
    Ok(h)
}

fn determinism() -> Outcome {
    let a = pipeline_hashes(Exec::Parallel)?;
    let b = pipeline_hashes(Exec::Parallel)?;
    let c = pipeline_hashes(Exec::Sequential)?;
    let differing: Vec<&String> = a
        .keys()
        .filter(|k| a[*k] != b[*k] || a[*k] != c[*k])
        .collect();
    let ok = differing.is_empty();
    Ok((
        ok,
        format!(
            "{} artifacts hashed over three runs (one sequential), differing: {differing:?}",
            a.len()
        ),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("metric oracle", metric_oracle),
        ("DDPM sanity", ddpm_sanity),
        ("bimodal recovery", bimodal_recovery),
        ("style recovery", style_recovery_check),
        ("crash protocol", crash_protocol),
        ("directional DSDP benefit", dsdp_benefit),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .filter(|n| (1..=8).contains(n))
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let (ok, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !ok as usize;
        println!(
            "criterion {n} {name}: {} | {detail} | {:.1} s",
            if ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
