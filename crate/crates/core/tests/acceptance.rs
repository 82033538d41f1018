//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary so the lines always reach the terminal.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamcnn::datapath::{AccelConfig, Accelerator, PoolUnit, SCRATCHPAD_ROWS};
use streamcnn::fxp::Fx16;
use streamcnn::netmodel::{alexnet, random_filters, random_tensor, ConvLayerSpec, PoolSpec, Tensor3D};
use streamcnn::oracle::{conv2d_ref, maxpool_ref, run_layer_ref};
use streamcnn::perfcli::{bundled_operating_points, energy_efficiency, peak_gops, run_cli};
use streamcnn::planner::{feature_splits, plan_layer, tile_footprint, TilePlan, SRAM_BYTES};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn net_path(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("nets")
        .join(name)
        .display()
        .to_string()
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["streamcnn"];
    argv.extend_from_slice(args);
    let code = run_cli(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn parse_ops(cell: &str) -> f64 {
    if let Some(g) = cell.strip_suffix('G') {
        g.parse::<f64>().unwrap() * 1e9
    } else {
        cell.strip_suffix('M').expect("ops cell").parse::<f64>().unwrap() * 1e6
    }
}

fn layer_report() -> Outcome {
    let t = Instant::now();
    let (code, out, err) = cli(&["plan", "--net", &net_path("alexnet.net"), "--sram-kb", "128"]);
    ensure(code == 0, format!("plan exited {code}: {err}"))?;
    let rows: Vec<Vec<&str>> = out
        .lines()
        .take_while(|l| !l.is_empty())
        .filter(|l| !l.starts_with("---"))
        .map(|l| l.split_whitespace().collect())
        .collect();
    ensure(
        rows.len() == 7,
        format!("expected header, 5 layers and totals, got {} rows", rows.len()),
    )?;
    let want_ops = [211e6, 448e6, 299e6, 224e6, 150e6];
    let want_in = ["309KB", "140KB", "87KB", "130KB", "130KB"];
    let want_out = ["581KB", "373KB", "130KB", "130KB", "87KB"];
    for (i, row) in rows[1..6].iter().enumerate() {
        let ops = parse_ops(row[3]);
        ensure(
            (ops - want_ops[i]).abs() <= 0.005 * want_ops[i],
            format!("layer {} ops {}", i + 1, row[3]),
        )?;
        let exact = alexnet().layers[i].ops_count() as f64;
        ensure(
            (exact - want_ops[i]).abs() <= 0.005 * want_ops[i],
            format!("layer {} analytic ops {exact}", i + 1),
        )?;
        ensure(row[4] == want_in[i], format!("layer {} input mem {}", i + 1, row[4]))?;
        ensure(row[5] == want_out[i], format!("layer {} output mem {}", i + 1, row[5]))?;
    }
    let total = &rows[6];
    ensure(
        total[0] == "total" && total[1] == "1.3G",
        format!("total ops {total:?}"),
    )?;
    ensure(total[4] == "2.1MB", format!("total mem {}", total[4]))?;
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("ops, memory and totals match ({elapsed:.0?})"))
}

fn throughput_arithmetic() -> Outcome {
    ensure(
        peak_gops(500.0) == 144.0,
        format!("peak at 500 MHz {}", peak_gops(500.0)),
    )?;
    ensure(peak_gops(20.0) == 5.76, format!("peak at 20 MHz {}", peak_gops(20.0)))?;
    let points = bundled_operating_points();
    let at = |f: f64| {
        points
            .iter()
            .find(|p| p.freq_mhz == f)
            .cloned()
            .ok_or(format!("no {f} MHz point"))
    };
    let (hi, lo) = (at(500.0)?, at(20.0)?);
    let e_hi = energy_efficiency(peak_gops(500.0), &hi);
    let e_lo = energy_efficiency(peak_gops(20.0), &lo);
    ensure(
        (e_hi - 0.339).abs() <= 0.001,
        format!("{e_hi:.4} TOPS/W at {} mW", hi.power_mw),
    )?;
    ensure(
        (e_lo - 0.823).abs() <= 0.001,
        format!("{e_lo:.4} TOPS/W at {} mW", lo.power_mw),
    )?;
    Ok(format!("144.0 / 5.76 GOPS, {e_hi:.3} / {e_lo:.3} TOPS/W"))
}

fn decomposition_footprint() -> Outcome {
    let t = Instant::now();
    let l = alexnet().layers[0];
    let fp = tile_footprint(&l, 3, 3, 2).map_err(|e| e.to_string())?;
    let within = |got: u64, want: f64| (got as f64 - want).abs() <= 0.10 * want;
    ensure(
        within(fp.input_naive, 34_000.0),
        format!("naive input tile {} B", fp.input_naive),
    )?;
    ensure(within(fp.output, 33_000.0), format!("output tile {} B", fp.output))?;
    let halo = fp.input_halo + fp.output;
    ensure(halo <= 128 * 1024, format!("halo-correct input + output {halo} B"))?;
    ensure(t.elapsed() < Duration::from_secs(1), "too slow")?;
    Ok(format!(
        "naive in {} B, out {} B, halo in {} B, in+out {} B",
        fp.input_naive, fp.output, fp.input_halo, halo
    ))
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0004);
    let mut seen = std::collections::BTreeSet::new();
    let mut macs = 0;
    for case in 0..200 {
        let l = common::random_layer(&mut rng, 64, 0.0);
        seen.insert((l.kernel, l.stride, l.pad, l.groups));
        let input = random_tensor(&mut rng, l.in_c, l.in_h, l.in_w, 4.0);
        let fan_in = (l.channels_per_group() * l.kernel * l.kernel) as f64;
        let filters = random_filters(&mut rng, &l, 2.0 / fan_in.sqrt());
        let want = conv2d_ref(&input, &filters, &l).map_err(|e| e.to_string())?;
        let plan = plan_layer(&l, SRAM_BYTES).map_err(|e| format!("case {case}: {e}"))?;
        let (got, c) = Accelerator::new(AccelConfig::default())
            .run_layer(&l, &plan, &input, &filters)
            .map_err(|e| format!("case {case} {l:?}: {e}"))?;
        ensure(got == want, format!("case {case}: {l:?} differs from the reference"))?;
        macs += c.macs;
    }
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!(
        "200 layers bit-identical, {} of 90 kernel/stride/pad/group combinations, {macs} MACs ({elapsed:.1?})",
        seen.len()
    ))
}

fn random_feasible_plan(rng: &mut impl Rng, l: &ConvLayerSpec, budget: u64) -> Option<TilePlan> {
    let (ow, oh, _) = l.out_dims().unwrap();
    let fs = feature_splits(l.out_c);
    for _ in 0..50 {
        let (gx, gy) = (rng.gen_range(1..=ow.min(6)), rng.gen_range(1..=oh.min(6)));
        let f = fs[rng.gen_range(0..fs.len())];
        if let Ok(p) = TilePlan::fitting(l, gx, gy, f, budget) {
            return Some(p);
        }
    }
    plan_layer(l, budget).ok()
}

fn tiling_invariance() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0005);
    let (mut pooled, mut tiled, mut cases) = (0, 0, 0);
    while cases < 50 {
        let l = common::random_layer(&mut rng, 64, if cases % 2 == 0 { 1.0 } else { 0.0 });
        let budget = [SRAM_BYTES, 32 * 1024, 16 * 1024, 8 * 1024][rng.gen_range(0..4)];
        let Some(plan) = random_feasible_plan(&mut rng, &l, budget) else {
            continue;
        };
        cases += 1;
        pooled += usize::from(l.pool.is_some());
        tiled += usize::from(!plan.is_trivial());
        let input = random_tensor(&mut rng, l.in_c, l.in_h, l.in_w, 4.0);
        let fan_in = (l.channels_per_group() * l.kernel * l.kernel) as f64;
        let filters = random_filters(&mut rng, &l, 2.0 / fan_in.sqrt());
        let want = run_layer_ref(&input, &filters, &l).map_err(|e| e.to_string())?;
        let config = AccelConfig {
            sram_bytes: budget,
            ..AccelConfig::default()
        };
        // the bank checks its live bytes against `budget` on every cycle
        let (got, c) = Accelerator::new(config)
            .run_layer(&l, &plan, &input, &filters)
            .map_err(|e| format!("{l:?} {}x{}x{}: {e}", plan.gx, plan.gy, plan.f))?;
        ensure(
            got == want,
            format!("{l:?} under {}x{}x{} differs", plan.gx, plan.gy, plan.f),
        )?;
        ensure(
            c.peak_sram_bytes <= budget,
            format!("peak {} B over {budget} B", c.peak_sram_bytes),
        )?;
    }
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!(
        "50 plans bit-identical ({tiled} tiled, {pooled} pooled) ({elapsed:.1?})"
    ))
}

/// Pool a convolution-output tensor through the scratchpad path. Rows are
/// laid out at stride-1 resolution, with the rows a strided convolution
/// skips filled with junk that the multiplexer must reject.
fn pool_through_unit(t: &Tensor3D, spec: PoolSpec, conv_stride: usize) -> Tensor3D {
    let (ow, oh) = (spec.out_dim(t.w).unwrap(), spec.out_dim(t.h).unwrap());
    let mut out = Tensor3D::zeros(t.c, oh, ow);
    for c in 0..t.c {
        let mut unit = PoolUnit::new(spec, conv_stride, t.w);
        let rows: Vec<Vec<Fx16>> = (0..(t.h - 1) * conv_stride + 1)
            .map(|r| {
                if r % conv_stride == 0 {
                    t.row(c, r / conv_stride).to_vec()
                } else {
                    vec![Fx16::MAX; t.w]
                }
            })
            .collect();
        let mut pooled = Vec::new();
        for (b, block) in rows.chunks(SCRATCHPAD_ROWS).enumerate() {
            pooled.extend(unit.push_scratchpad(block, b * SCRATCHPAD_ROWS));
        }
        assert_eq!(pooled.len(), oh);
        for (y, row) in pooled.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                out.set(c, y, x, *v);
            }
        }
    }
    out
}

fn pooling_conformance() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0006);
    let mut cells = 0;
    for kernel in [2, 3] {
        for stride in [1, 2, 3] {
            for conv_stride in [1, 2] {
                let spec = PoolSpec::new(kernel, stride).unwrap();
                for i in 0..20 {
                    let (h, w) = (rng.gen_range(kernel..=24), rng.gen_range(kernel..=24));
                    let x = random_tensor(&mut rng, 3, h, w, 100.0);
                    let want = maxpool_ref(&x, &spec).map_err(|e| e.to_string())?;
                    ensure(
                        common::as_nested(&want) == common::brute_pool(&common::as_nested(&x), kernel, stride),
                        "reference pooling disagrees with brute force",
                    )?;
                    let got = pool_through_unit(&x, spec, conv_stride);
                    ensure(
                        got == want,
                        format!("pool {kernel}/{stride} after conv stride {conv_stride}, tensor {i}"),
                    )?;
                }
                // and once through the whole datapath
                let l = ConvLayerSpec::new(23, 21, 2, 4, 3)
                    .with_stride(conv_stride)
                    .with_pad(1)
                    .with_pool(spec);
                let input = random_tensor(&mut rng, 2, 21, 23, 4.0);
                let filters = random_filters(&mut rng, &l, 0.5);
                let want = run_layer_ref(&input, &filters, &l).map_err(|e| e.to_string())?;
                let plan = TilePlan::new(&l, 2, 2, 2).map_err(|e| e.to_string())?;
                let (got, _) = Accelerator::new(AccelConfig::default())
                    .run_layer(&l, &plan, &input, &filters)
                    .map_err(|e| e.to_string())?;
                ensure(
                    got == want,
                    format!("datapath pool {kernel}/{stride}, conv stride {conv_stride}"),
                )?;
                cells += 1;
            }
        }
    }
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!("{cells} cells x 20 tensors identical ({elapsed:.1?})"))
}

fn field<T: std::str::FromStr>(text: &str, after: &str) -> Option<T> {
    let i = text.find(after)? + after.len();
    text[i..].split_whitespace().next()?.parse().ok()
}

fn end_to_end() -> Outcome {
    let t = Instant::now();
    let (code, out, err) = cli(&["verify", "--net", &net_path("alexnet.net"), "--seed", "7"]);
    ensure(code == 0, format!("verify exited {code}: {err}{out}"))?;
    ensure(out.contains("verify: OK"), "no OK line")?;
    let cycles: u64 = field(&out, "cycles ").ok_or("no cycle count")?;
    let macs: u64 = field(&out, "MACs ").ok_or("no MAC count")?;
    let achieved: f64 = field(&out, "throughput ").ok_or("no throughput")?;
    let peak: f64 = field(&out, "GOPS of ").ok_or("no peak")?;
    let analytic: u64 = alexnet().layers.iter().map(|l| l.macs()).sum();
    ensure(achieved <= 144.0 && peak == 144.0, format!("{achieved} GOPS of {peak}"))?;
    ensure(cycles * 144 >= macs, format!("{cycles} cycles for {macs} MACs"))?;
    ensure(
        cycles * 144 >= analytic,
        format!("{cycles} cycles for {analytic} layer MACs"),
    )?;
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(600), format!("took {elapsed:?}"))?;
    Ok(format!(
        "5 layers identical, {cycles} cycles, {achieved:.2} GOPS ({elapsed:.1?})"
    ))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 7] = [
        ("layer report", layer_report),
        ("throughput arithmetic", throughput_arithmetic),
        ("decomposition footprint", decomposition_footprint),
        ("oracle equivalence", oracle_equivalence),
        ("tiling invariance", tiling_invariance),
        ("pooling conformance", pooling_conformance),
        ("end-to-end verify", end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS - {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL - {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
