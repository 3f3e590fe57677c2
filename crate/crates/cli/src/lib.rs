//! `refseg` command-line harness.
//!
//! Subcommands: `gradcheck` (the registered gradient-check suite),
//! `gen-data` (synthetic shapes-and-expressions dataset), `train` (seeded
//! SGD), `eval` (Overall IoU / Prec@X / length buckets), `infer` (masks for
//! one image + expression), and `bench-mem` (the VCM-vs-ACM memory-scaling
//! table). All tables are tab-separated with a header row; every command is
//! bit-deterministic under a fixed seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refseg_core::checks;
use refseg_core::coattn::{
    acm_core, attention_cost, vcm_core, AcmVars, AttentionVariant, PpmSpec,
};
use refseg_core::data::{
    assign_splits, generate_dataset, load_dataset, read_ppm, write_pbm, write_pgm, LoadedSample,
    Split,
};
use refseg_core::encoder::FusionMode;
use refseg_core::model::{forward, load_checkpoint};
use refseg_core::params::Binder;
use refseg_core::tensor::{RawTensor, Tape};
use refseg_core::text::tokenize;
use refseg_core::train::{all_foreground_iou, evaluate_model, train, RunConfig};

/// Expression-length bucket upper edges (inclusive); lengths past the last
/// edge land in an open final bucket.
pub const LENGTH_EDGES: [usize; 3] = [3, 5, 7];

#[derive(Parser)]
#[command(name = "refseg", version, about = "referring-image-segmentation toy stack")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Vcm,
    Acm,
    None,
}

impl VariantArg {
    fn to_core(self) -> Option<AttentionVariant> {
        match self {
            VariantArg::Vcm => Some(AttentionVariant::Vcm),
            VariantArg::Acm => Some(AttentionVariant::Acm),
            VariantArg::None => None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Efn,
    Dfn,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BemArg {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand)]
pub enum Command {
    /// Run the registered gradient checks (optionally filtered by substring)
    Gradcheck {
        /// substring filter over check names; unknown pattern exits 2
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// randomized repetitions per check
        #[arg(long, default_value_t = checks::DEFAULT_SEEDS)]
        seeds: u64,
        /// also write the table to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic shapes-and-expressions dataset
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 576)]
        count: usize,
        /// validation samples (default: count/10, the 90/10 split)
        #[arg(long)]
        val_count: Option<usize>,
        /// square image side, multiple of 8
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train on a generated dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// flat key=value run config; flags below override it
        #[arg(long)]
        config: Option<PathBuf>,
        /// start from the full-scale reference schedule instead of toy defaults
        #[arg(long)]
        paper_preset: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        variant: Option<VariantArg>,
        #[arg(long)]
        mode: Option<ModeArg>,
        #[arg(long)]
        bem: Option<BemArg>,
    },
    /// Evaluate a checkpoint on one dataset split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// also write the report to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image given a referring expression
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// P6 PPM image, dims multiples of 8
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expr: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// VCM-vs-ACM attention memory scaling (analytic + measured)
    BenchMem {
        /// input channels C
        #[arg(long, default_value_t = 512)]
        c: usize,
        /// projection channels C1
        #[arg(long, default_value_t = 64)]
        c1: usize,
        /// square spatial sizes
        #[arg(long, value_delimiter = ',', default_values_t = [20usize, 40, 96])]
        sizes: Vec<usize>,
        /// skip any row whose estimated allocation exceeds this many elements
        #[arg(long, default_value_t = 256_000_000)]
        alloc_cap: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// also write the (wall-time-free, deterministic) table to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Dispatch a parsed invocation; the return value is the process exit code.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Command::Gradcheck {
            filter,
            seed,
            seeds,
            out,
        } => cmd_gradcheck(filter.as_deref(), seed, seeds, out.as_deref()),
        Command::GenData {
            out,
            count,
            val_count,
            size,
            seed,
        } => cmd_gen_data(&out, count, val_count, size, seed),
        Command::Train {
            data,
            out,
            config,
            paper_preset,
            seed,
            steps,
            variant,
            mode,
            bem,
        } => cmd_train(
            &data,
            &out,
            config.as_deref(),
            paper_preset,
            seed,
            steps,
            variant,
            mode,
            bem,
        ),
        Command::Eval {
            ckpt,
            data,
            split,
            out,
        } => cmd_eval(&ckpt, &data, split, out.as_deref()),
        Command::Infer {
            ckpt,
            image,
            expr,
            out,
        } => cmd_infer(&ckpt, &image, &expr, &out),
        Command::BenchMem {
            c,
            c1,
            sizes,
            alloc_cap,
            seed,
            out,
        } => cmd_bench_mem(c, c1, &sizes, alloc_cap, seed, out.as_deref()),
    }
}

// ── gradcheck ─────────────────────────────────────────────────────────

fn cmd_gradcheck(
    filter: Option<&str>,
    seed: u64,
    seeds: u64,
    out: Option<&Path>,
) -> Result<u8> {
    let results = match checks::run_checks(filter, seed, seeds) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return Ok(2);
        }
    };
    let mut table = String::from("check\tmax_rel_err\tstatus\n");
    for r in &results {
        let _ = writeln!(
            table,
            "{}\t{:.3e}\t{}",
            r.name,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    print!("{table}");
    if let Some(p) = out {
        fs::write(p, &table)?;
    }
    Ok(if results.iter().all(|r| r.pass) { 0 } else { 1 })
}

// ── gen-data ──────────────────────────────────────────────────────────

fn cmd_gen_data(
    out: &Path,
    count: usize,
    val_count: Option<usize>,
    size: usize,
    seed: u64,
) -> Result<u8> {
    if count == 0 {
        bail!("--count must be at least 1");
    }
    if size == 0 || !size.is_multiple_of(8) {
        bail!("--size must be a positive multiple of 8");
    }
    let val = val_count.unwrap_or(count / 10);
    if val >= count {
        bail!("--val-count {val} leaves no training samples out of {count}");
    }
    let (samples, vocab) = generate_dataset(count, size, size, seed);
    let splits = assign_splits(count, val, seed);
    refseg_core::data::write_dataset(out, &samples, &vocab, &splits)?;
    println!("samples\ttrain\tval\tvocab");
    println!("{count}\t{}\t{val}\t{}", count - val, vocab.len());
    Ok(0)
}

// ── train ─────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    paper_preset: bool,
    seed: Option<u64>,
    steps: Option<usize>,
    variant: Option<VariantArg>,
    mode: Option<ModeArg>,
    bem: Option<BemArg>,
) -> Result<u8> {
    let mut run_cfg = if paper_preset {
        RunConfig::paper()
    } else {
        RunConfig::default()
    };
    if let Some(path) = config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let parsed = RunConfig::from_kv(&text)?;
        if paper_preset {
            bail!("--paper-preset and --config are mutually exclusive");
        }
        run_cfg = parsed;
    }
    if let Some(s) = seed {
        run_cfg.seed = s;
    }
    if let Some(s) = steps {
        run_cfg.steps = s;
    }
    if let Some(v) = variant {
        run_cfg.variant = v.to_core();
    }
    if let Some(m) = mode {
        run_cfg.mode = match m {
            ModeArg::Efn => FusionMode::Efn,
            ModeArg::Dfn => FusionMode::Dfn,
        };
    }
    if let Some(b) = bem {
        run_cfg.bem = matches!(b, BemArg::On);
    }

    let (samples, vocab) = load_dataset(data)?;
    let outcome = train(&run_cfg, &samples, &vocab, out)?;
    fs::write(out.join("run_config.txt"), run_cfg.to_kv())?;
    println!("steps\tfirst_loss\tfinal_loss");
    println!(
        "{}\t{:.6}\t{:.6}",
        run_cfg.steps, outcome.first_loss, outcome.final_loss
    );
    Ok(0)
}

// ── eval ──────────────────────────────────────────────────────────────

fn bucket_label(idx: usize) -> String {
    let edges = LENGTH_EDGES;
    if idx == 0 {
        format!("len<={}", edges[0])
    } else if idx < edges.len() {
        format!("len{}-{}", edges[idx - 1] + 1, edges[idx])
    } else {
        format!("len>={}", edges[edges.len() - 1] + 1)
    }
}

fn cmd_eval(ckpt: &Path, data: &Path, split: SplitArg, out: Option<&Path>) -> Result<u8> {
    let (cfg, vocab, params) = load_checkpoint(ckpt)?;
    let (samples, _) = load_dataset(data)?;
    let want = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let subset: Vec<&LoadedSample> = samples.iter().filter(|s| s.split == want).collect();
    if subset.is_empty() {
        bail!("split {want:?} is empty in {}", data.display());
    }
    let report = evaluate_model(&cfg, &params, &vocab, &subset, &LENGTH_EDGES)?;
    let mut table = String::from("metric\tvalue\n");
    let _ = writeln!(table, "samples\t{}", subset.len());
    let _ = writeln!(table, "overall_iou\t{:.6}", report.overall_iou);
    for (t, v) in &report.prec_at {
        let _ = writeln!(table, "prec@0.{t}\t{v:.6}");
    }
    for (b, v) in &report.length_buckets {
        let _ = writeln!(table, "iou_{}\t{v:.6}", bucket_label(*b));
    }
    let _ = writeln!(
        table,
        "all_foreground_iou\t{:.6}",
        all_foreground_iou(&subset)
    );
    print!("{table}");
    if let Some(p) = out {
        fs::write(p, &table)?;
    }
    Ok(0)
}

// ── infer ─────────────────────────────────────────────────────────────

fn cmd_infer(ckpt: &Path, image: &Path, expr: &str, out: &Path) -> Result<u8> {
    let (cfg, vocab, params) = load_checkpoint(ckpt)?;
    let img = read_ppm(image)?;
    for word in expr.split_whitespace() {
        if vocab.id(&word.to_lowercase()).is_none() {
            eprintln!("warning: unknown token {word:?} mapped to UNK");
        }
    }
    let tokens = tokenize(expr, &vocab, cfg.text.max_len)?;
    let tape = Tape::new();
    let binder = Binder::new(&tape, &params, false);
    let fwd = forward(&binder, &cfg, &img, &tokens, false)?;

    fs::create_dir_all(out)?;
    let (h, w) = (img.shape[1], img.shape[2]);
    let probs = RawTensor::from_vec(&[h, w], fwd.state.prediction.data());
    write_pgm(&out.join("sm.pgm"), &probs)?;
    let mask = RawTensor::from_vec(
        &[h, w],
        probs.data.iter().map(|&v| f64::from(v >= 0.5)).collect(),
    );
    write_pbm(&out.join("mask.pbm"), &mask)?;
    if let Some(bm) = fwd.state.bm[0] {
        let s = bm.shape();
        let bm_raw = if (s[1], s[2]) == (h, w) {
            RawTensor::from_vec(&[h, w], bm.data())
        } else {
            let up = bm.bilinear_resize(h, w)?;
            RawTensor::from_vec(&[h, w], up.data())
        };
        write_pgm(&out.join("bm.pgm"), &bm_raw)?;
    }
    println!("wrote\t{}", out.display());
    Ok(0)
}

// ── bench-mem ─────────────────────────────────────────────────────────

pub struct BenchRow {
    pub variant: AttentionVariant,
    pub c: usize,
    pub c1: usize,
    pub h: usize,
    pub w: usize,
    pub anchors: Option<usize>,
    pub affinity_elements: u64,
    pub affinity_bytes: u64,
    pub flops: u64,
    /// affinity growth ratio against the previous size for this variant
    pub ratio_vs_prev: Option<f64>,
    /// None when the row was skipped under the allocation cap
    pub measured_elements: Option<u64>,
    pub wall_ms: Option<f64>,
}

/// Upper-bound estimate of elements the forward will push on the tape; used
/// only for the cap decision, never reported.
fn estimated_alloc(variant: AttentionVariant, c: usize, c1: usize, h: usize, w: usize) -> u64 {
    let hw = (h * w) as u64;
    match variant {
        // a, a1, aᵀ, a2 and two transposes of normalized maps: 6 affinity-
        // sized buffers, plus the flattened/projected feature maps
        AttentionVariant::Vcm => 6 * hw * hw + (6 * c as u64 + 2 * c1 as u64) * hw,
        AttentionVariant::Acm => 12 * 110 * hw + (6 * c as u64 + 8 * c1 as u64) * hw,
    }
}

fn measure_forward(
    variant: AttentionVariant,
    c: usize,
    c1: usize,
    h: usize,
    w: usize,
    spec: &PpmSpec,
    seed: u64,
) -> Result<(u64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new();
    let mut rand_leaf = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        tape.leaf(shape, data)
    };
    let m = rand_leaf(&[c, h, w])?;
    let l = rand_leaf(&[c, h, w])?;
    let start = Instant::now();
    let before = tape.alloc_elems();
    match variant {
        AttentionVariant::Vcm => {
            let w_m = rand_leaf(&[c1, c])?;
            let w_l = rand_leaf(&[c1, c])?;
            let _ = vcm_core(m, l, w_m, w_l, false)?;
        }
        AttentionVariant::Acm => {
            let mut p = || rand_leaf(&[c1, c]);
            let dummy = tape.leaf(&[1], vec![0.0])?;
            let vars = AcmVars {
                w1_m: p()?,
                w2_m: p()?,
                w3_m: p()?,
                w1_l: p()?,
                w2_l: p()?,
                w3_l: p()?,
                fuse_w: dummy,
                fuse_b: dummy,
            };
            let _ = acm_core(m, l, &vars, spec, false)?;
        }
    }
    let measured = tape.alloc_elems() - before;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((measured, wall_ms))
}

pub fn bench_rows(
    c: usize,
    c1: usize,
    sizes: &[usize],
    alloc_cap: u64,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() {
        bail!("--sizes must name at least one spatial size");
    }
    let spec = PpmSpec::default();
    let mut rows = Vec::new();
    for variant in [AttentionVariant::Vcm, AttentionVariant::Acm] {
        let mut prev: Option<u64> = None;
        for &s in sizes {
            let cost = attention_cost(variant, c, c1, s, s, &spec);
            let (measured, wall_ms) = if estimated_alloc(variant, c, c1, s, s) <= alloc_cap {
                let (m, t) = measure_forward(variant, c, c1, s, s, &spec, seed)?;
                (Some(m), Some(t))
            } else {
                (None, None)
            };
            rows.push(BenchRow {
                variant,
                c,
                c1,
                h: s,
                w: s,
                anchors: cost.anchors,
                affinity_elements: cost.affinity_elements,
                affinity_bytes: cost.bytes,
                flops: cost.flops,
                ratio_vs_prev: prev.map(|p| cost.affinity_elements as f64 / p as f64),
                measured_elements: measured,
                wall_ms,
            });
            prev = Some(cost.affinity_elements);
        }
    }
    Ok(rows)
}

/// Render the benchmark table. `with_wall_time` adds the (non-deterministic)
/// timing column, so files written with `--out` leave it off.
pub fn render_bench_table(rows: &[BenchRow], with_wall_time: bool) -> String {
    let mut t = String::from(
        "variant\tc\tc1\th\tw\tanchors\taffinity_elems\taffinity_bytes\tflops\tratio_vs_prev\tmeasured_elems",
    );
    if with_wall_time {
        t.push_str("\twall_ms");
    }
    t.push('\n');
    for r in rows {
        let _ = write!(
            t,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.variant,
            r.c,
            r.c1,
            r.h,
            r.w,
            r.anchors.map_or("-".into(), |a| a.to_string()),
            r.affinity_elements,
            r.affinity_bytes,
            r.flops,
            r.ratio_vs_prev
                .map_or("-".into(), |v| format!("{v:.2}")),
            r.measured_elements
                .map_or("skipped: allocation cap".into(), |m| m.to_string()),
        );
        if with_wall_time {
            let _ = write!(
                t,
                "\t{}",
                r.wall_ms.map_or("-".into(), |v| format!("{v:.2}"))
            );
        }
        t.push('\n');
    }
    t
}

fn cmd_bench_mem(
    c: usize,
    c1: usize,
    sizes: &[usize],
    alloc_cap: u64,
    seed: u64,
    out: Option<&Path>,
) -> Result<u8> {
    let rows = bench_rows(c, c1, sizes, alloc_cap, seed)?;
    print!("{}", render_bench_table(&rows, true));
    if let Some(p) = out {
        fs::write(p, render_bench_table(&rows, false))?;
    }
    // measured allocations can never undershoot the analytic affinity count
    for r in &rows {
        if let Some(m) = r.measured_elements {
            if m < r.affinity_elements {
                return Err(anyhow!(
                    "measured allocation {} below analytic affinity count {}",
                    m,
                    r.affinity_elements
                ));
            }
        }
    }
    Ok(0)
}
