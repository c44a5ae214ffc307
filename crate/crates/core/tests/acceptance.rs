//! Acceptance gate, run with its own harness so the report is always shown.
//! Each check prints one `criterion N: PASS|FAIL` line and then asserts; the
//! process exits non-zero if any check failed. Criterion 1 (full-scale
//! benchmark numbers) is out of reach on a desk machine and only prints a note.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use node_imgnet::ablation::run_ablation;
use node_imgnet::checkpoint::{from_bytes, to_bytes};
use node_imgnet::data::{add_gaussian_noise, make_dataset, Dataset, DatasetConfig, NoiseSpec, PatchSpec};
use node_imgnet::field::LAYERS;
use node_imgnet::gradcheck::{finite_difference_gradient, relative_error};
use node_imgnet::metrics::psnr;
use node_imgnet::netpbm::{decode, encode};
use node_imgnet::ode::{order_probe, stubs::LinearDecay};
use node_imgnet::rng::{stream, Stream};
use node_imgnet::synth::{synth_images, SynthConfig};
use node_imgnet::train::{evaluate_model, input_psnr, TrainConfig, Trainer};
use node_imgnet::{
    receptive_fields, Denoiser, HasParameters, Mode, Offsets, Shape, Tape, Tensor, VectorField, VectorFieldConfig,
};
use rand::Rng;

fn report(criterion: u32, pass: bool, detail: impl std::fmt::Display, elapsed: Duration) {
    println!(
        "criterion {criterion}: {} ({detail}; {:.2}s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
}

fn uniform_tensor<T: node_imgnet::Real>(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = stream(seed, Stream::Synthetic, 900);
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| T::of(rng.random_range(lo..hi))).collect()).unwrap()
}

/// Gradient entries compared, entries within 1e-6 and worst relative error.
#[derive(Default)]
struct GradTally {
    total: usize,
    within: usize,
    worst: f64,
}

fn grad_check(channels: usize, mode: Mode, tally: &mut GradTally) {
    let config = VectorFieldConfig::new(channels, 4)
        .with_seed(21 + channels as u64)
        .with_zero_output(false);
    let mut model = Denoiser::<f64>::build(config, 2).unwrap();
    // Running statistics away from their initial values, so eval mode is not
    // a plain affine map. Gamma and beta stay at init: shifting beta negative
    // kills ReLU channels, and batch norm over a near-constant channel makes
    // the train-mode loss too curved for a 1e-5 central difference.
    for (k, bn) in model.field.norms_mut().iter_mut().enumerate() {
        for (i, m) in bn.running_mean.data_mut().iter_mut().enumerate() {
            *m = 0.02 * ((k + 2 * i) % 5) as f64;
        }
        for (i, v) in bn.running_var.data_mut().iter_mut().enumerate() {
            *v = 0.5 + 0.25 * ((k + i) % 3) as f64;
        }
    }
    let shape = Shape::new(2, channels, 8, 8).unwrap();
    let y = uniform_tensor::<f64>(shape, 1, 0.0, 1.0);
    let target = uniform_tensor::<f64>(shape, 2, 0.0, 1.0);
    // Frozen offsets: the same seed on every evaluation.
    let offsets = Offsets::Sampled(77);

    let loss_of = |m: &mut Denoiser<f64>| {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let tv = tape.constant(target.clone());
        let out = m.forward(&mut tape, yv, offsets, mode)?;
        let loss = tape.mse_loss(out, tv)?;
        Ok(tape.value(loss)?.data()[0])
    };

    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let tv = tape.constant(target.clone());
    let out = model.forward(&mut tape, yv, offsets, mode).unwrap();
    let loss = tape.mse_loss(out, tv).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = model
        .parameters()
        .iter()
        .map(|p| grads.get(p.id()).cloned().unwrap_or_else(|| Tensor::zeros(p.value().shape())))
        .collect();

    let numeric = finite_difference_gradient(&mut model, loss_of, 1e-5).unwrap();
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&a, &n) in a.data().iter().zip(n.data()) {
            let err = relative_error(a, n);
            tally.worst = tally.worst.max(err);
            tally.within += (err < 1e-6) as usize;
            tally.total += 1;
        }
    }
}

fn criterion_01_benchmark_numbers_not_reproduced() {
    println!(
        "criterion 1: NOTE (not reproduced: full benchmark PSNR needs the full training sets \
         and long accelerator training; the desk run in criterion 7 is the scaled-down check)"
    );
}

fn criterion_02_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut tally = GradTally::default();
    for channels in [1usize, 3] {
        for mode in [Mode::Train, Mode::Eval] {
            grad_check(channels, mode, &mut tally);
        }
    }
    let fraction = tally.within as f64 / tally.total as f64;
    let elapsed = start.elapsed();
    let pass = fraction >= 0.99 && tally.worst < 1e-4 && elapsed < Duration::from_secs(60);
    report(
        2,
        pass,
        format!(
            "{}/{} entries below 1e-6 ({:.2}%), worst {:.2e}",
            tally.within,
            tally.total,
            100.0 * fraction,
            tally.worst
        ),
        elapsed,
    );
    assert!(pass);
}

fn criterion_03_solver_is_first_order() {
    let start = Instant::now();
    let exact = (-1.0f64).exp();
    let probe = order_probe(&mut LinearDecay { rate: 1.0 }, 1.0, exact, &[8, 16, 32, 64, 128]).unwrap();
    let ratios: Vec<f64> = probe[..4].windows(2).map(|w| w[0].1 / w[1].1).collect();
    let final_err = probe[4].1;
    let elapsed = start.elapsed();
    let pass = ratios.iter().all(|r| (1.7..=2.3).contains(r)) && final_err < 4e-3 && elapsed < Duration::from_secs(1);
    report(3, pass, format!("ratios {ratios:.3?}, error at N=128 {final_err:.3e}"), elapsed);
    assert!(pass);
}

fn criterion_04_single_step_is_residual_block() {
    let start = Instant::now();
    let mut all_equal = true;
    for (k, channels) in [1usize, 3, 1, 3].into_iter().enumerate() {
        let config = VectorFieldConfig::new(channels, 8).with_seed(k as u64).with_zero_output(false);
        let mut model = Denoiser::<f32>::build(config, 1).unwrap();
        let y = uniform_tensor::<f32>(Shape::new(3, channels, 12, 10).unwrap(), 40 + k as u64, -0.2, 1.2);
        for mode in [Mode::Eval, Mode::Train] {
            let mut reference = model.field.clone();
            let mut tape = Tape::new();
            let h = tape.constant(y.clone());
            let out = model.forward(&mut tape, h, Offsets::Zero, mode).unwrap();
            let out = tape.value(out).unwrap().clone();

            let mut tape = Tape::new();
            let h = tape.constant(y.clone());
            let f = reference.evaluate(&mut tape, h, 0.0, mode).unwrap();
            let expected: Vec<f32> = y.data().iter().zip(tape.value(f).unwrap().data()).map(|(a, b)| a + b).collect();
            all_equal &= out.bitwise_eq(&Tensor::from_vec(y.shape(), expected).unwrap());
        }
    }
    let elapsed = start.elapsed();
    let pass = all_equal && elapsed < Duration::from_secs(1);
    report(4, pass, "N=1 output equal bitwise to h0 + F(h0, 0)", elapsed);
    assert!(pass);
}

/// Side length of the set of output pixels that change when one input pixel
/// changes.
fn measured_support(field: &VectorField<f64>, size: usize) -> usize {
    let shape = Shape::new(1, 1, size, size).unwrap();
    let base = Tensor::<f64>::full(shape, 0.5);
    let mut bumped = base.clone();
    bumped.set(0, 0, size / 2, size / 2, 0.9);
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let out = field.evaluate_eval(&mut tape, h, 0.0).unwrap();
        tape.value(out).unwrap().clone()
    };
    let (a, b) = (run(&base), run(&bumped));
    let changed: Vec<usize> = (0..size)
        .filter(|&x| (a.get(0, 0, size / 2, x) - b.get(0, 0, size / 2, x)).abs() > 0.0)
        .collect();
    changed.last().unwrap() - changed.first().unwrap() + 1
}

/// Tap-by-tap propagation of a boolean support mask.
#[allow(clippy::needless_range_loop)]
fn mask_support(dilations: &[usize], size: usize) -> Vec<usize> {
    let mut mask = vec![vec![false; size]; size];
    mask[size / 2][size / 2] = true;
    let mut widths = Vec::new();
    for &d in dilations {
        let mut next = vec![vec![false; size]; size];
        for y in 0..size {
            for x in 0..size {
                if !mask[y][x] {
                    continue;
                }
                for dy in [-1i64, 0, 1] {
                    for dx in [-1i64, 0, 1] {
                        let (ny, nx) = (y as i64 + dy * d as i64, x as i64 + dx * d as i64);
                        if (0..size as i64).contains(&ny) && (0..size as i64).contains(&nx) {
                            next[ny as usize][nx as usize] = true;
                        }
                    }
                }
            }
        }
        mask = next;
        let cols: Vec<usize> = (0..size).filter(|&x| mask[size / 2][x]).collect();
        widths.push(cols.last().unwrap() - cols.first().unwrap() + 1);
    }
    widths
}

fn criterion_05_receptive_fields() {
    let start = Instant::now();
    let expected = vec![3, 11, 19, 27, 35, 43, 51, 53, 55];
    let config = VectorFieldConfig::new(1, 4).with_seed(3);
    let formula = receptive_fields(&config.dilations);
    let mask = mask_support(&config.dilations, 60);

    // A network whose every activation is positive, so no ReLU hides a path.
    let mut field = VectorField::<f64>::build(config).unwrap();
    for conv in field.convs_mut() {
        for w in conv.weight.value_mut().data_mut() {
            *w = w.abs() + 0.01;
        }
        conv.bias.value_mut().fill(0.01);
    }
    let network = measured_support(&field, 64);

    let elapsed = start.elapsed();
    let pass = formula == expected && mask == expected && network == expected[LAYERS - 1] && elapsed < Duration::from_secs(30);
    report(
        5,
        pass,
        format!("formula {formula:?}, mask {mask:?}, network {network}"),
        elapsed,
    );
    assert!(pass);
}

fn count_by_hand(c: usize, hidden: usize) -> usize {
    let convs = (c + 1) * hidden * 9 + hidden + 7 * (hidden * hidden * 9 + hidden) + hidden * c * 9 + c;
    convs + 8 * 2 * hidden
}

fn criterion_06_parameter_counts() {
    let start = Instant::now();
    let big = VectorField::<f32>::build(VectorFieldConfig::new(3, 128)).unwrap().param_count();
    let small = VectorField::<f32>::build(VectorFieldConfig::new(3, 64)).unwrap().param_count();
    let pass = (1_000_000..=1_080_000).contains(&big)
        && (240_000..=280_000).contains(&small)
        && big == count_by_hand(3, 128)
        && small == count_by_hand(3, 64)
        && (big as f64 / 1e6 * 100.0).round() / 100.0 == 1.04
        && (small as f64 / 1e6 * 100.0).round() / 100.0 == 0.26;
    report(6, pass, format!("hidden 128: {big}, hidden 64: {small}"), start.elapsed());
    assert!(pass);
}

struct DeskRun {
    checkpoint: Vec<u8>,
    log: String,
    gain_db: f64,
    input_db: f64,
    output_db: f64,
    steps: u64,
    elapsed: Duration,
}

fn desk_dataset() -> Dataset {
    let images = synth_images(&SynthConfig {
        count: 64,
        channels: 1,
        height: 48,
        width: 48,
        seed: 2024,
    })
    .unwrap();
    make_dataset(
        &images,
        &DatasetConfig {
            patch: PatchSpec {
                patch_size: 32,
                patches_per_image: 32,
            },
            noise: NoiseSpec::fixed(25.0).unwrap(),
            augment: false,
            eval_fraction: 0.125,
            seed: 2024,
        },
    )
    .unwrap()
}

fn desk_run() -> DeskRun {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let start = Instant::now();
        let data = desk_dataset();
        let config = TrainConfig {
            batch_size: 16,
            max_epochs: 50,
            max_steps: Some(500),
            seed: 2024,
            ..Default::default()
        };
        let mut model = Denoiser::<f32>::build(VectorFieldConfig::new(1, 16).with_seed(2024), 2).unwrap();
        let mut trainer = Trainer::new(config, &model).unwrap();
        trainer.run(&mut model, &data, |_| {}).unwrap();
        let input_db = input_psnr(&data.eval).unwrap();
        let output_db = evaluate_model(&model, &data.eval, 16, Offsets::Zero).unwrap().mean_psnr;
        DeskRun {
            checkpoint: to_bytes(&model, &trainer.adam, &trainer.log, config.seed),
            log: trainer.log.to_csv(false),
            gain_db: output_db - input_db,
            input_db,
            output_db,
            steps: trainer.steps(),
            elapsed: start.elapsed(),
        }
    })
}

fn first_desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(desk_run)
}

fn criterion_07_desk_training_gains_three_db() {
    let run = first_desk_run();
    let pass = run.gain_db >= 3.0 && run.steps <= 500 && run.elapsed <= Duration::from_secs(600);
    report(
        7,
        pass,
        format!(
            "{} steps, noisy {:.2} dB -> denoised {:.2} dB, gain {:.2} dB",
            run.steps, run.input_db, run.output_db, run.gain_db
        ),
        run.elapsed,
    );
    assert!(pass);
}

fn criterion_08_runs_are_bit_identical() {
    let start = Instant::now();
    let first = first_desk_run();
    let second = desk_run();
    let pass = first.checkpoint == second.checkpoint && first.log == second.log;
    report(
        8,
        pass,
        format!("checkpoints {} bytes, logs {} lines", first.checkpoint.len(), first.log.lines().count()),
        start.elapsed(),
    );
    assert!(pass);
}

fn criterion_09_noise_statistics() {
    let start = Instant::now();
    let blind = NoiseSpec::blind(0.0, 55.0).unwrap();
    let patch = Tensor::<f32>::full(Shape::new(1, 1, 4, 4).unwrap(), 0.5);
    let mut rng = stream(9, Stream::TrainNoise, 0);
    let sigmas: Vec<f64> = (0..10_000).map(|_| add_gaussian_noise(&patch, &blind, &mut rng).1).collect();
    let mean = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
    let (lo, hi) = sigmas.iter().fold((f64::MAX, f64::MIN), |(a, b), &s| (a.min(s), b.max(s)));

    let big = Tensor::<f32>::full(Shape::new(1, 1, 128, 128).unwrap(), 0.5);
    let (noisy, _) = add_gaussian_noise(&big, &NoiseSpec::fixed(25.0).unwrap(), &mut stream(9, Stream::TrainNoise, 1));
    let d: Vec<f64> = noisy.data().iter().map(|&v| v as f64 - 0.5).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    let std = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    let rel = (std - 25.0 / 255.0).abs() / (25.0 / 255.0);

    let pass = (26.5..=28.5).contains(&mean) && lo >= 0.0 && hi <= 55.0 && rel < 0.03;
    report(
        9,
        pass,
        format!("blind mean sigma {mean:.3} in [{lo:.3}, {hi:.3}]; fixed std off by {:.2}%", 100.0 * rel),
        start.elapsed(),
    );
    assert!(pass);
}

fn criterion_10_metric_and_io_exactness() {
    let start = Instant::now();
    let shape = Shape::new(1, 1, 16, 16).unwrap();
    let target = Tensor::<f64>::full(shape, 0.25);
    let shifted = target.map(|v| v + 16.0 / 255.0);
    let p16 = psnr(&shifted, &target, 1.0).unwrap().decibels;
    let half = psnr(&target.map(|v| v + 0.5), &target, 1.0).unwrap().decibels;
    let psnr_ok = (p16 - 20.0 * (255.0f64 / 16.0).log10()).abs() < 0.01 && (half - 20.0 * 2f64.log10()).abs() < 0.01;

    let mut io_ok = true;
    for channels in [1usize, 3] {
        let shape = Shape::new(1, channels, 7, 9).unwrap();
        let img = Tensor::<f32>::from_vec(shape, (0..shape.numel()).map(|i| ((i * 29) % 256) as f32 / 255.0).collect())
            .unwrap();
        let back: Tensor<f32> = decode(&encode(&img).unwrap()).unwrap();
        io_ok &= back.bitwise_eq(&img);
    }

    let model = Denoiser::<f32>::build(VectorFieldConfig::new(3, 8).with_seed(5), 2).unwrap();
    let adam = node_imgnet::Adam::for_model(Default::default(), &model);
    let bytes = to_bytes(&model, &adam, &Default::default(), 5);
    let back = from_bytes(&bytes, Some(model.config())).unwrap();
    let ckpt_ok = back.model == model && back.adam == adam && to_bytes(&back.model, &back.adam, &back.log, 5) == bytes;

    let pass = psnr_ok && io_ok && ckpt_ok;
    report(
        10,
        pass,
        format!("psnr {p16:.4} / {half:.4} dB, image round trip {io_ok}, checkpoint round trip {ckpt_ok}"),
        start.elapsed(),
    );
    assert!(pass);
}

fn criterion_11_ablation_cost_grows_with_steps() {
    let start = Instant::now();
    let images = synth_images(&SynthConfig {
        count: 8,
        ..Default::default()
    })
    .unwrap();
    let data = make_dataset(
        &images,
        &DatasetConfig {
            patch: PatchSpec {
                patch_size: 32,
                patches_per_image: 8,
            },
            eval_fraction: 0.25,
            seed: 11,
            ..Default::default()
        },
    )
    .unwrap();
    let train = TrainConfig {
        batch_size: 8,
        max_epochs: 2,
        max_steps: Some(10),
        seed: 11,
        ..Default::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let rows = pool
        .install(|| run_ablation(&VectorFieldConfig::new(1, 16), &train, &data, &[0, 1, 2, 4], |_| {}))
        .unwrap();
    let work_increasing = rows.windows(2).all(|w| w[0].work_per_batch < w[1].work_per_batch);
    // N = 0 and N = 1 differ by one addition, far below timer resolution, so
    // wall time is compared from N = 1 on.
    let time_increasing = rows[1..]
        .windows(2)
        .all(|w| w[0].seconds_per_100_batches < w[1].seconds_per_100_batches);
    let same_params = rows.iter().all(|r| r.params == rows[0].params);
    let pass = rows.len() == 4 && work_increasing && time_increasing && same_params;
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("N={} work {} s/100 {:.3}", r.steps, r.work_per_batch, r.seconds_per_100_batches))
        .collect();
    report(11, pass, summary.join(", "), start.elapsed());
    assert!(pass);
}

fn main() {
    let checks: [(&str, fn()); 11] = [
        ("criterion_01_benchmark_numbers_not_reproduced", criterion_01_benchmark_numbers_not_reproduced),
        ("criterion_02_gradients_match_finite_differences", criterion_02_gradients_match_finite_differences),
        ("criterion_03_solver_is_first_order", criterion_03_solver_is_first_order),
        ("criterion_04_single_step_is_residual_block", criterion_04_single_step_is_residual_block),
        ("criterion_05_receptive_fields", criterion_05_receptive_fields),
        ("criterion_06_parameter_counts", criterion_06_parameter_counts),
        ("criterion_07_desk_training_gains_three_db", criterion_07_desk_training_gains_three_db),
        ("criterion_08_runs_are_bit_identical", criterion_08_runs_are_bit_identical),
        ("criterion_09_noise_statistics", criterion_09_noise_statistics),
        ("criterion_10_metric_and_io_exactness", criterion_10_metric_and_io_exactness),
        ("criterion_11_ablation_cost_grows_with_steps", criterion_11_ablation_cost_grows_with_steps),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        if std::panic::catch_unwind(check).is_err() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all checks passed");
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
