//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Run with `cargo test -p eseg-core --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use eseg::deploy::{head_flops, lite_pipeline, rewrite_shift_base_level};
use eseg::fusion::{fold_head_softmax, Topology};
use eseg::gradcheck::{check_kernels, check_random_graphs};
use eseg::graph::{count_flops, count_params, forward, Op};
use eseg::io::{generate_synthetic, SyntheticSpec};
use eseg::metrics::ConfusionMatrix;
use eseg::model::{build_model, match_fpn_channels, ModelConfig, INPUT, LOGITS};
use eseg::selftrain::{multiscale_infer, pseudolabel, MixedBatchSampler, PseudoLabelConfig, SegModel, Source};
use eseg::tensor::{softmax_vec, ActKind, BnMode};
use eseg::train::{cross_entropy_ohem, evaluate, train_loop, OhemConfig, TrainConfig};
use eseg::{Params, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

const HW: (usize, usize) = (1024, 2048);

fn cost(cfg: &ModelConfig) -> Result<(u64, u64), String> {
    let g = build_model(cfg).map_err(e)?;
    Ok((
        count_params(&g).map_err(e)?,
        count_flops(&g, cfg.input_shape(1, HW.0, HW.1)).map_err(e)?,
    ))
}

fn zoo_costs() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, params, flops) in [
        ("eseg-s", 6.9e6, 34.5e9),
        ("eseg-m", 20.0e6, 112e9),
        ("eseg-l", 70.5e6, 343e9),
    ] {
        let (p, f) = cost(&ModelConfig::zoo(name).map_err(e)?)?;
        let (dp, df) = (p as f64 / params - 1.0, f as f64 / flops - 1.0);
        ok &= dp.abs() <= 0.10 && df.abs() <= 0.15;
        parts.push(format!(
            "{name} {:.2}M ({:+.1}%) {:.1}B ({:+.1}%)",
            p as f64 / 1e6,
            100.0 * dp,
            f as f64 / 1e9,
            100.0 * df
        ));
    }
    check(ok, parts.join(", "))
}

fn level_ablation() -> Outcome {
    let s = ModelConfig::zoo("eseg-s").map_err(e)?;
    let (p5, f5) = cost(&ModelConfig {
        max_level: 5,
        ..s.clone()
    })?;
    let (p9, f9) = cost(&s)?;
    let dp = p9 as f64 - p5 as f64;
    let df = 100.0 * (f9 as f64 - f5 as f64) / f5 as f64;
    check(
        (0.2e6..=0.8e6).contains(&dp) && df.abs() <= 1.5,
        format!("P2-P5 -> P2-P9: params {:+.3}M, FLOPs {df:+.2}%", dp / 1e6),
    )
}

fn fusion_ablation() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["eseg-s", "eseg-m", "eseg-l"] {
        let base = ModelConfig::zoo(name).map_err(e)?;
        let ch = match_fpn_channels(&base, HW.0, HW.1).map_err(e)?;
        let (_, fb) = cost(&ModelConfig {
            topology: Topology::Bifpn,
            ..base.clone()
        })?;
        let (_, ff) = cost(&ModelConfig {
            topology: Topology::Fpn,
            fpn_channels: ch,
            ..base.clone()
        })?;
        let gap = (ff as f64 - fb as f64).abs() / fb as f64;
        ok &= gap <= 0.20;
        parts.push(format!(
            "{name} fpn@{ch}ch vs bifpn@{}ch {:.2}%",
            base.fpn_channels,
            100.0 * gap
        ));
    }
    check(ok, parts.join(", "))
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let kernels = check_kernels(0, 1e-4).map_err(e)?;
    let graphs = check_random_graphs(0, 25, 1e-4).map_err(e)?;
    let all: Vec<_> = kernels.iter().chain(&graphs).collect();
    let worst = all.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = all.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    check(
        failed.is_empty() && graphs.len() == 25,
        format!(
            "{} kernels + {} random graphs, worst rel err {worst:.2e}, {:.1}s{}",
            kernels.len(),
            graphs.len(),
            t.elapsed().as_secs_f64(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join(" "))
            }
        ),
    )
}

fn fold_equivalence() -> Outcome {
    let mut worst = 0.0f32;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            min_level: rng.random_range(2..=3),
            max_level: rng.random_range(5..=7),
            topology: if rng.random_bool(0.5) {
                Topology::Bifpn
            } else {
                Topology::Fpn
            },
            activation: if rng.random_bool(0.5) {
                ActKind::Relu
            } else {
                ActKind::Silu
            },
            ..ModelConfig::desk_toy(rng.random_range(2..=5))
        };
        let g = build_model(&cfg).map_err(e)?;
        let mut params = Params::<f32>::init(&g, seed);
        for v in params.get_mut("head/fuse/level_weights").map_err(e)?.data_mut() {
            *v = rng.random_range(-3.0..3.0);
        }
        let folded = fold_head_softmax(&g, &params).map_err(e)?;
        if folded.count_kind(|op| matches!(op, Op::SoftmaxFusion { .. })) != 0 {
            return Err(format!("seed {seed}: softmax fusion survived folding"));
        }
        let hw = cfg.required_multiple();
        let x = Tensor::<f32>::from_fn(Shape::new(1, 3, hw, hw), |_| rng.random_range(-1.0..1.0));
        let ins = [(INPUT.to_string(), x)].into_iter().collect();
        let a = forward(&g, &params, &ins, BnMode::Infer).map_err(e)?;
        let b = forward(&folded, &params, &ins, BnMode::Infer).map_err(e)?;
        let (a, b) = (a.output(&g, LOGITS).map_err(e)?, b.output(&folded, LOGITS).map_err(e)?);
        for (u, v) in a.data().iter().zip(b.data()) {
            worst = worst.max((u - v).abs());
        }
    }
    check(
        worst <= 1e-6,
        format!("50 models, max |unfolded - folded| = {worst:.2e}"),
    )
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        lr0: 0.1,
        total_steps: 200,
        momentum: 0.9,
        weight_decay: 5e-5,
        batch: 8,
        ohem: OhemConfig::default(),
        ema_decay: 0.99,
        seed: 7,
        augment: None,
        eval_every: 50,
    }
}

fn desk_training() -> Outcome {
    let cfg = ModelConfig::desk_toy(4);
    let g = build_model(&cfg).map_err(e)?;
    let train = generate_synthetic(&SyntheticSpec::desk(256, 1)).map_err(e)?;
    let eval = generate_synthetic(&SyntheticSpec::desk(64, 2)).map_err(e)?;
    let init = Params::<f32>::init(&g, 0);
    let baseline = evaluate(&g, &init, &eval, 4, 255, 16).map_err(e)?.miou().map_err(e)?;
    let t = Instant::now();
    let run = train_loop(&g, init.clone(), &train, &eval, 4, &desk_config()).map_err(e)?;
    let secs = t.elapsed().as_secs_f64();
    let again = train_loop(&g, init, &train, &eval, 4, &desk_config()).map_err(e)?;
    let deterministic = run.trace == again.trace && run.params == again.params;
    let miou = run.trace.last().and_then(|r| r.miou).ok_or("no final evaluation")?;
    let curve: Vec<String> = run
        .trace
        .iter()
        .filter_map(|r| r.miou.map(|m| format!("{}:{m:.3}", r.step + 1)))
        .collect();
    check(
        miou >= 0.6 && deterministic && secs < 600.0,
        format!(
            "mIoU {miou:.3} (init {baseline:.3}; {}), deterministic trace: {deterministic}, {secs:.0}s per run",
            curve.join(" ")
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..1000 {
        let k = rng.random_range(2..=6usize);
        let n = rng.random_range(1..=64usize);
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..k as u8)).collect();
        let truth: Vec<u8> = (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    255
                } else {
                    rng.random_range(0..k as u8)
                }
            })
            .collect();
        let mut cm = ConfusionMatrix::new(k, 255);
        cm.accumulate(&pred, &truth).map_err(e)?;
        // brute force over pixels
        let valid: Vec<usize> = (0..n).filter(|&i| truth[i] != 255).collect();
        for t in 0..k {
            for p in 0..k {
                let count = valid
                    .iter()
                    .filter(|&&i| truth[i] as usize == t && pred[i] as usize == p)
                    .count();
                if cm.get(t, p) != count as u64 {
                    return Err(format!("trial {trial}: count ({t},{p}) differs"));
                }
            }
        }
        let mut ious = Vec::new();
        for c in 0..k {
            let inter = valid
                .iter()
                .filter(|&&i| truth[i] as usize == c && pred[i] as usize == c)
                .count();
            let union = valid
                .iter()
                .filter(|&&i| truth[i] as usize == c || pred[i] as usize == c)
                .count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let correct = valid.iter().filter(|&&i| truth[i] == pred[i]).count();
        match (cm.miou(), ious.is_empty()) {
            (Ok(m), false) => {
                let want = ious.iter().sum::<f64>() / ious.len() as f64;
                if m != want {
                    return Err(format!("trial {trial}: mIoU {m} vs {want}"));
                }
                let acc = cm.pixel_accuracy().map_err(e)?;
                if acc != correct as f64 / valid.len() as f64 {
                    return Err(format!("trial {trial}: pixel accuracy {acc}"));
                }
            }
            (Err(_), true) => {}
            (got, _) => return Err(format!("trial {trial}: unexpected {got:?}")),
        }
    }
    let mut cm = ConfusionMatrix::new(2, 255);
    cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).map_err(e)?;
    let m = cm.miou().map_err(e)?;
    check(
        m == (1.0 / 2.0 + 2.0 / 3.0) / 2.0 && (m - 7.0 / 12.0).abs() < 1e-15,
        format!("1000 random maps exact, hand example mIoU {m} = 7/12"),
    )
}

fn rewrite_pipeline() -> Outcome {
    let cfg = ModelConfig::zoo("eseg-s").map_err(e)?;
    let g = build_model(&cfg).map_err(e)?;
    let (lite, reports) = lite_pipeline(&g).map_err(e)?;
    let se = lite.count_kind(|op| matches!(op, Op::ChannelGate | Op::GlobalAvgPool));
    let silu = lite.count_kind(|op| matches!(op, Op::Activation { kind: ActKind::Silu }));
    let dw = lite.count_kind(|op| matches!(op, Op::DepthwiseConv2d { .. }));
    let preserved = reports.iter().all(|r| r.shapes_preserved);
    let (again, second) = lite_pipeline(&lite).map_err(e)?;
    let idempotent = again == lite && second.iter().all(|r| r.matches == 0);

    let shifted = rewrite_shift_base_level(&cfg).map_err(e)?;
    let (lite3, _) = lite_pipeline(&build_model(&shifted).map_err(e)?).map_err(e)?;
    let input = cfg.input_shape(1, HW.0, HW.1);
    let (h2, h3) = (
        head_flops(&lite, input).map_err(e)?,
        head_flops(&lite3, input).map_err(e)?,
    );
    let ratio = h3 as f64 / h2 as f64;
    check(
        se == 0 && silu == 0 && dw == 0 && preserved && idempotent && (ratio / 0.25 - 1.0).abs() <= 0.05,
        format!(
            "SE {se}, SiLU {silu}, depthwise {dw}, shapes preserved {preserved}, idempotent {idempotent}, \
             head FLOPs P3/P2 = {ratio:.4}"
        ),
    )
}

struct Constant(Vec<f64>);

impl SegModel<f64> for Constant {
    fn num_classes(&self) -> usize {
        self.0.len()
    }
    fn required_multiple(&self) -> usize {
        16
    }
    fn logits(&self, image: &Tensor<f64>) -> eseg::Result<Tensor<f64>> {
        let s = image.shape();
        Ok(Tensor::from_fn(Shape::new(1, self.0.len(), s.h, s.w), |[_, c, _, _]| {
            self.0[c]
        }))
    }
}

fn self_training() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100 {
        let k = rng.random_range(2..=6usize);
        let (h, w) = (rng.random_range(1..=8usize), rng.random_range(1..=8usize));
        let mut probs = Tensor::<f64>::zeros(Shape::new(1, k, h, w));
        for p in 0..h * w {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            for (c, v) in softmax_vec(&raw).map_err(e)?.into_iter().enumerate() {
                probs.data_mut()[c * h * w + p] = v;
            }
        }
        let mut thresholds: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..0.99)).collect();
        thresholds.sort_by(f64::total_cmp);
        let mut prev: Option<Vec<u8>> = None;
        for t in thresholds {
            let cfg = PseudoLabelConfig {
                threshold: t,
                ..Default::default()
            };
            let labels = pseudolabel(&probs, &cfg).map_err(e)?;
            if let Some(prev) = &prev {
                // a higher threshold only turns labels into ignore
                if labels.iter().zip(prev).any(|(&l, &q)| l != 255 && l != q) {
                    return Err(format!("trial {trial}: threshold {t} is not monotone"));
                }
            }
            prev = Some(labels);
        }
    }

    let stub = Constant(vec![0.4, -1.2, 2.5, 0.0]);
    let dist = softmax_vec(&stub.0).map_err(e)?;
    for (h, w, scales) in [
        (20, 36, vec![0.5, 1.0, 2.0]),
        (7, 9, vec![0.75, 1.25]),
        (16, 16, vec![1.0]),
    ] {
        let image = Tensor::<f64>::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| (c + 2 * y + x) as f64 / 40.0);
        let cfg = PseudoLabelConfig {
            scales,
            ..Default::default()
        };
        let out = multiscale_infer(&stub, &image, &cfg).map_err(e)?;
        let plane = h * w;
        let exact = (0..4).all(|c| out.data()[c * plane..(c + 1) * plane].iter().all(|&v| v == dist[c]));
        if !exact {
            return Err(format!("{h}x{w}: constant stub distribution is not reproduced exactly"));
        }
    }

    let mut sampler = MixedBatchSampler::new((0..50).collect(), (1000..1200).collect(), 0.5, 3).map_err(e)?;
    for batch in (2..=64).step_by(2) {
        for _ in 0..10 {
            let items = sampler.mix_batches(batch).map_err(e)?;
            let labeled = items.iter().filter(|i| i.source == Source::Labeled).count();
            if items.len() != batch || 2 * labeled != batch {
                return Err(format!("batch {batch}: {labeled} labeled"));
            }
        }
    }
    Ok("100 maps monotone, constant stub exact, 320 batches split exactly half/half".into())
}

fn ohem_degenerate() -> Outcome {
    let cfg = OhemConfig {
        prob_threshold: 1.0,
        min_kept_fraction: 1.0,
        ignore_index: 255,
    };
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let (n, k, h, w) = (2, rng.random_range(2..=6usize), 4, 5);
        let logits = Tensor::<f64>::from_fn(Shape::new(n, k, h, w), |_| rng.random_range(-4.0..4.0));
        let labels: Vec<u8> = (0..n * h * w)
            .map(|_| {
                if rng.random_bool(0.15) {
                    255
                } else {
                    rng.random_range(0..k as u8)
                }
            })
            .collect();
        let out = cross_entropy_ohem(&logits, &labels, &cfg).map_err(e)?;
        // plain cross-entropy by loops
        let plane = h * w;
        let valid = labels.iter().filter(|&&l| l != 255).count() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; logits.numel()];
        for b in 0..n {
            for p in 0..plane {
                let y = labels[b * plane + p];
                if y == 255 {
                    continue;
                }
                let z: Vec<f64> = (0..k).map(|c| logits.data()[(b * k + c) * plane + p]).collect();
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += lse - z[y as usize];
                for c in 0..k {
                    let pc = (z[c] - lse).exp();
                    grad[(b * k + c) * plane + p] = (pc - if c == y as usize { 1.0 } else { 0.0 }) / valid;
                }
            }
        }
        loss /= valid;
        worst = worst.max((out.loss - loss).abs());
        for (a, b) in out.grad.data().iter().zip(&grad) {
            worst = worst.max((a - b).abs());
        }
    }
    check(
        worst <= 1e-10,
        format!("20 batches, max |ohem - plain CE| over loss and gradient = {worst:.2e}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("model-zoo costs", zoo_costs),
        ("pyramid level ablation", level_ablation),
        ("FPN vs BiFPN cost", fusion_ablation),
        ("gradient suite", gradients),
        ("softmax fold equivalence", fold_equivalence),
        ("desk-scale learning", desk_training),
        ("metric oracles", metric_oracles),
        ("deployment rewrites", rewrite_pipeline),
        ("self-training mechanics", self_training),
        ("OHEM degenerates to CE", ohem_degenerate),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} [{:>2}] {name}: {detail} ({:.1}s)",
            i + 1,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
