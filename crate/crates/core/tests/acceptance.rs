//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use ncmht::association::{murty_kbest, CostMatrix};
use ncmht::experiment::{run_experiment, write_outputs, ExperimentResults, Mode, RunConfig};
use ncmht::linalg::Mat2;
use ncmht::metrics::{bootstrap_confidence_less, bootstrap_confidence_less_unpaired, gospa, GospaParams, RunMetrics};
use ncmht::mht::{existence_probability, score_update, TrackerParams};
use ncmht::ncfilter::{predict, update};
use ncmht::network::{RoadNetwork, Segment, SegmentId};
use ncmht::sim::{Preset, Variant, S3A_SENSOR_COUNTS, S3B_EMPTY_FRACTIONS};
use ncmht::statespace::{make_cv_model, make_obs_model, HybridEstimate, KinematicState, Observation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RESAMPLES: usize = 10_000;
const CONFIDENCE: f64 = 0.95;

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

fn within(limit: Duration, start: Instant, mut o: Outcome) -> Outcome {
    let took = start.elapsed();
    if took > limit {
        o.pass = false;
        o.detail = format!("{} (took {:.1?}, limit {:?})", o.detail, took, limit);
    } else {
        o.detail = format!("{} [{:.1?}]", o.detail, took);
    }
    o
}

fn c1_murty() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..200 {
        let rows = rng.random_range(1..=5);
        let cols = rng.random_range(rows..=5);
        let integer = trial % 2 == 0;
        let mut m = CostMatrix::new(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if rng.random::<f64>() < 0.1 {
                    continue;
                }
                let v: f64 = rng.random_range(0.0..10.0);
                m.set(r, c, if integer { v.floor() } else { v });
            }
        }
        let expected = brute_force_assignments(&m);
        let got = murty_kbest(&m, expected.len() + 1);
        let same = got.len() == expected.len()
            && got
                .iter()
                .zip(&expected)
                .all(|(g, (c, cols))| g.cost == *c && &g.columns == cols);
        if !same {
            return outcome(false, format!("trial {trial}: order differs from brute force"));
        }
    }
    outcome(true, "200 random matrices up to 5x5 match brute force exactly")
}

fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0)])
        .collect()
}

fn c2_gospa() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let g = GospaParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let nx = rng.random_range(0..=4);
        let ny = rng.random_range(0..=4);
        let x = points(&mut rng, nx);
        let y = points(&mut rng, ny);
        let r = gospa(&x, &y, &g);
        let (total, _, _) = brute_force_gospa(&x, &y, g.c, g.p);
        worst = worst.max((r.total - total).abs());
    }
    outcome(worst <= 1e-9, format!("200 trials, max deviation {worst:.2e}"))
}

fn c3_tracker_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let params = exhaustive_params();
    for trial in 0..100 {
        let targets = rng.random_range(1..=2);
        let mut state: Vec<(f64, f64)> = (0..targets)
            .map(|_| (rng.random_range(10.0..40.0), rng.random_range(-1.8..1.8)))
            .collect();
        let mut scans = Vec::new();
        for _ in 0..3 {
            let mut obs = Vec::new();
            for (p, v) in &state {
                if rng.random::<f64>() < 0.9 && obs.len() < 2 {
                    obs.push((p + rng.random_range(-0.6..0.6), v + rng.random_range(-0.3..0.3)));
                }
            }
            if obs.len() < 2 && rng.random::<f64>() < 0.3 {
                obs.push((rng.random_range(0.0..60.0), rng.random_range(-2.0..2.0)));
            }
            scans.push(obs);
            for s in &mut state {
                s.0 += s.1;
            }
        }
        let mut t = nc_tracker(line(1000.0), params.clone(), Some(1e6));
        for (k, obs) in scans.iter().enumerate() {
            if t.process_scan(&scan_on(0, k as u32, 0.0, 1000.0, obs)).is_err() {
                return outcome(false, format!("trial {trial}: tracker error"));
            }
        }
        let (lp, tracks) = tracker_best(&t, &scans);
        let (olp, otracks) = oracle_best(&scans, &params);
        if tracks != otracks || (lp - olp).abs() > 1e-9 {
            return outcome(
                false,
                format!("trial {trial}: tracker {lp} {tracks:?} vs oracle {olp} {otracks:?}"),
            );
        }
    }
    outcome(true, "100 random micro-scenarios equal exhaustive scoring")
}

fn c4_scores() -> Outcome {
    let miss = score_update(1.7f64, 0.95, 0.01, None) - 1.7;
    let d = (miss - (-2.99573)).abs();
    let e = existence_probability(0.0f64);
    // The same step through the tracker: an empty scan over a fresh track.
    let net = line(500.0);
    let mut a = nc_tracker(net.clone(), exhaustive_params(), None);
    let mut b = nc_tracker(net, exhaustive_params(), None);
    for t in [&mut a, &mut b] {
        t.process_scan(&scan_on(0, 0, 0.0, 500.0, &[(20.0, 1.4)])).unwrap();
    }
    a.advance_to(1).unwrap();
    b.process_scan(&scan_on(0, 1, 0.0, 500.0, &[])).unwrap();
    let tracked = b.leaves().next().unwrap().score - a.leaves().next().unwrap().score;
    let exact = (1.0f64 - 0.95).ln();
    let ok = d <= 1e-5 && (miss - exact).abs() <= 1e-9 && (tracked - exact).abs() <= 1e-9 && e == 0.5;
    outcome(
        ok,
        format!("miss increment {miss:.9} (tracker {tracked:.9}), existence(0) = {e}"),
    )
}

fn c5_branching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.random_range(10.0..80.0);
        let k = rng.random_range(2..=4);
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = w.iter().sum();
        let mut segments = vec![Segment::new([0.0, 0.0], [len, 0.0])];
        let mut succ = Vec::new();
        for (i, wi) in w.iter().enumerate() {
            let angle = -1.0 + i as f64 * 0.6;
            segments.push(Segment::new([len, 0.0], [len + 40.0 * f64::cos(angle), 40.0 * f64::sin(angle)]));
            succ.push((SegmentId(i + 1), wi / total));
        }
        let mut trans = vec![succ];
        trans.extend((0..k).map(|_| Vec::new()));
        let net = Arc::new(RoadNetwork::new(segments, trans).unwrap());
        let params = TrackerParams {
            p_s: 1.0,
            ..exhaustive_params()
        };
        let mut t = nc_tracker(net, params, None);
        let vel = rng.random_range(0.5..3.0);
        let pos = len - rng.random_range(0.0..vel);
        t.process_scan(&scan_on(0, 0, 0.0, len, &[(pos, vel)])).unwrap();
        let parent = t.leaves().next().unwrap().score;
        t.advance_to(1).unwrap();
        let mass: f64 = t.leaves().map(|l| (l.score - parent).exp()).sum();
        worst = worst.max((mass - 1.0).abs());
    }
    outcome(worst <= 1e-9, format!("1000 fork predictions, max |mass - 1| = {worst:.2e}"))
}

fn preset(p: Preset, v: Variant, mode: Mode, runs: usize) -> ExperimentResults {
    let mut cfg = RunConfig::preset(p, v).unwrap();
    cfg.mode = mode;
    cfg.mc_runs = runs;
    cfg.seed = 2024;
    run_experiment(&cfg).unwrap()
}

fn per_run(r: &ExperimentResults, nc: bool, f: impl Fn(&RunMetrics) -> f64) -> Vec<f64> {
    let t = if nc { r.nc.as_ref() } else { r.fs.as_ref() };
    t.unwrap().per_run(f)
}

fn sum(v: &[f64]) -> f64 {
    v.iter().sum()
}

fn c6_scenario1() -> Outcome {
    let r = preset(Preset::S1, Variant::default(), Mode::Both, 50);
    let (g_nc, g_fs) = (per_run(&r, true, |m| m.gospa), per_run(&r, false, |m| m.gospa));
    let (l_nc, l_fs) = (
        per_run(&r, true, |m| m.track_length),
        per_run(&r, false, |m| m.track_length),
    );
    let (mt_nc, mt_fs) = (sum(&per_run(&r, true, |m| m.missed)), sum(&per_run(&r, false, |m| m.missed)));
    let conf_g = bootstrap_confidence_less(&g_nc, &g_fs, RESAMPLES, 61);
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    let conf_l = bootstrap_confidence_less(&neg(&l_nc), &neg(&l_fs), RESAMPLES, 62);
    let ratio = mt_fs / mt_nc.max(1e-12);
    let ok = sum(&g_nc) < sum(&g_fs) && conf_g >= CONFIDENCE && conf_l >= CONFIDENCE && ratio >= 5.0;
    outcome(
        ok,
        format!(
            "GOSPA nc {:.1} < fs {:.1} (conf {conf_g:.3}); track length nc {:.2} > fs {:.2} (conf {conf_l:.3}); MT nc {mt_nc} fs {mt_fs} ratio {ratio:.2} (need >= 5)",
            sum(&g_nc),
            sum(&g_fs),
            r.nc.as_ref().unwrap().summary.track_length,
            r.fs.as_ref().unwrap().summary.track_length,
        ),
    )
}

fn c7_scenario2() -> Outcome {
    let r = preset(Preset::S2, Variant::default(), Mode::Both, 50);
    let (g_nc, g_fs) = (per_run(&r, true, |m| m.gospa), per_run(&r, false, |m| m.gospa));
    let (m_nc, m_fs) = (per_run(&r, true, |m| m.missed), per_run(&r, false, |m| m.missed));
    let conf_g = bootstrap_confidence_less(&g_nc, &g_fs, RESAMPLES, 71);
    let conf_m = bootstrap_confidence_less(&m_nc, &m_fs, RESAMPLES, 72);
    let ok = sum(&g_nc) < sum(&g_fs) && sum(&m_nc) < sum(&m_fs) && conf_g >= CONFIDENCE && conf_m >= CONFIDENCE;
    outcome(
        ok,
        format!(
            "GOSPA nc {:.1} fs {:.1} (conf {conf_g:.3}); MT nc {} fs {} (conf {conf_m:.3})",
            sum(&g_nc),
            sum(&g_fs),
            sum(&m_nc),
            sum(&m_fs)
        ),
    )
}

fn c8_scenario3a() -> Outcome {
    let runs: Vec<Vec<f64>> = S3A_SENSOR_COUNTS
        .iter()
        .map(|&n| {
            let v = Variant {
                sensors: Some(n),
                ..Variant::default()
            };
            per_run(&preset(Preset::S3a, v, Mode::Nc, 20), true, |m| m.gospa)
        })
        .collect();
    let sums: Vec<f64> = runs.iter().map(|r| sum(r)).collect();
    let mut violations = 0;
    let mut significant = false;
    for i in 0..sums.len() - 1 {
        if sums[i + 1] > sums[i] {
            violations += 1;
            // Confidence that the larger sensor count is really worse.
            let c = bootstrap_confidence_less_unpaired(&runs[i], &runs[i + 1], RESAMPLES, 80 + i as u64);
            significant |= c >= CONFIDENCE;
        }
    }
    let ok = violations == 0 || (violations == 1 && !significant);
    let shown: Vec<String> = S3A_SENSOR_COUNTS
        .iter()
        .zip(&sums)
        .map(|(n, s)| format!("{n}: {s:.1}"))
        .collect();
    outcome(ok, format!("GOSPA by sensors {}; violations {violations}", shown.join(", ")))
}

fn c9_scenario3b() -> Outcome {
    let run = |f: f64| {
        let v = Variant {
            empty_scan_fraction: Some(f),
            ..Variant::default()
        };
        per_run(&preset(Preset::S3b, v, Mode::Nc, 20), true, |m| m.gospa)
    };
    let all: Vec<Vec<f64>> = S3B_EMPTY_FRACTIONS.iter().map(|&f| run(f)).collect();
    let (low, full) = (&all[0], &all[all.len() - 1]);
    let conf = bootstrap_confidence_less_unpaired(full, low, RESAMPLES, 91);
    let shown: Vec<String> = S3B_EMPTY_FRACTIONS
        .iter()
        .zip(&all)
        .map(|(f, r)| format!("{f}: {:.1}", sum(r)))
        .collect();
    outcome(
        sum(full) < sum(low) && conf >= CONFIDENCE,
        format!("GOSPA by empty-scan fraction {}; conf(100% < 25%) {conf:.3}", shown.join(", ")),
    )
}

fn read_dir(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn c10_determinism() -> Outcome {
    let mut cfg = RunConfig::preset(Preset::S2, Variant::default()).unwrap();
    cfg.mc_runs = 6;
    cfg.seed = 77;
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let first = run_experiment(&cfg).unwrap();
    write_outputs(&first, dirs[0].path()).unwrap();
    let manifest = std::fs::read_to_string(dirs[0].path().join("scenario2_manifest.toml")).unwrap();
    let again = RunConfig::from_toml(&manifest).unwrap();
    let second = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_experiment(&again).unwrap());
    write_outputs(&second, dirs[1].path()).unwrap();
    let third = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| run_experiment(&again).unwrap());
    write_outputs(&third, dirs[2].path()).unwrap();
    let a = read_dir(dirs[0].path());
    let ok = a == read_dir(dirs[1].path()) && a == read_dir(dirs[2].path());
    outcome(
        ok,
        format!("{} output files bit-identical across manifest rerun and 1/4 workers", a.len()),
    )
}

fn c11_filter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let net = RoadNetwork::new(vec![Segment::new([0.0, 0.0], [1e7, 0.0])], vec![vec![]]).unwrap();
    let mut min_ev = f64::INFINITY;
    let mut asym: f64 = 0.0;
    for _ in 0..1000 {
        let sigma = rng.random_range(0.1..3.0);
        let q = rng.random_range(0.01..1.0);
        let mm = make_cv_model(1.0, q).unwrap();
        let om = make_obs_model(sigma).unwrap();
        let mut est: HybridEstimate<f64> = HybridEstimate::new(
            KinematicState::new(1000.0, 1.0),
            Mat2::diagonal([rng.random_range(0.01..10.0), rng.random_range(0.01..3.0)]),
            SegmentId(0),
        );
        for _ in 0..rng.random_range(1..50) {
            if rng.random::<bool>() {
                est = predict(&net, &mm, &est).unwrap().branches[0].0;
            } else {
                let obs = Observation::on_segment(
                    SegmentId(0),
                    est.mean.position + rng.random_range(-3.0..3.0),
                    est.mean.velocity + rng.random_range(-1.0..1.0),
                );
                est = update(&om, &est, &obs).unwrap().estimate;
            }
            let c: Mat2<f64> = est.covariance;
            asym = asym.max((c[(0, 1)] - c[(1, 0)]).abs());
            let ev = c.symmetric_eigenvalues();
            min_ev = min_ev.min(ev[0].min(ev[1]));
        }
    }
    // Inflated noise: the update should barely move the mean.
    let mut moved: f64 = 0.0;
    for _ in 0..1000 {
        let est = HybridEstimate::new(
            KinematicState::new(rng.random_range(0.0..100.0), rng.random_range(-2.0..2.0)),
            Mat2::diagonal([rng.random_range(0.01..4.0), rng.random_range(0.01..1.0)]),
            SegmentId(0),
        );
        let om = make_obs_model(0.5 * 1e3).unwrap();
        let obs = Observation::on_segment(
            SegmentId(0),
            est.mean.position + rng.random_range(-3.0..3.0),
            est.mean.velocity + rng.random_range(-1.0..1.0),
        );
        let post: HybridEstimate<f64> = update(&om, &est, &obs).unwrap().estimate;
        moved = moved.max((post.mean.position - est.mean.position).abs());
    }
    outcome(
        asym == 0.0 && min_ev >= -1e-9 && moved < 1e-3,
        format!("min eigenvalue {min_ev:.3e}, max asymmetry {asym:.1e}, max shift with R x 1e6 {moved:.2e} m"),
    )
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 11] = [
        ("1 murty vs brute force", c1_murty, Duration::from_secs(10)),
        ("2 gospa vs brute force", c2_gospa, Duration::from_secs(10)),
        ("3 tracker vs exhaustive scoring", c3_tracker_oracle, Duration::from_secs(30)),
        ("4 score arithmetic", c4_scores, Duration::MAX),
        ("5 branching conservation", c5_branching, Duration::MAX),
        ("6 scenario 1 trend", c6_scenario1, Duration::from_secs(600)),
        ("7 scenario 2 trend", c7_scenario2, Duration::from_secs(600)),
        ("8 scenario 3a monotonicity", c8_scenario3a, Duration::from_secs(1200)),
        ("9 scenario 3b negative information", c9_scenario3b, Duration::from_secs(1200)),
        ("10 determinism", c10_determinism, Duration::MAX),
        ("11 filter algebra", c11_filter, Duration::MAX),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run, limit) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = within(limit, start, run());
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
