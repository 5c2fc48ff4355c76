use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use mx_core::exact_acc::{required_width, ExactSum};
use mx_core::minifloat::{FloatSpec, RoundingPolicy};
use mx_core::mx::{check_accumulator, mx_dot, AccumulatorKind, MxVector, ScaleExp};
use mx_core::train::{self, checkpoint, Model, PrecisionConfig, RunConfig, TrainError, PRESET_NAMES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::manifest::RunManifest;
use crate::{BenchArgs, GenerateArgs, QuantizeArgs, TrainArgs};

/// A failed command and its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Diverged(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Diverged(_) => 4,
        }
    }

    pub fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Diverged(m) => m.clone(),
            Failure::Data(e) => format!("{e:#}"),
        }
    }

    /// The reader of stdout went away, e.g. `mx presets | head -1`.
    pub fn is_broken_pipe(&self) -> bool {
        let Failure::Data(e) = self else { return false };
        e.chain().any(|c| match c.downcast_ref::<io::Error>() {
            Some(io) => io.kind() == io::ErrorKind::BrokenPipe,
            None => matches!(c.downcast_ref::<csv::Error>().map(csv::Error::kind), Some(csv::ErrorKind::Io(io)) if io.kind() == io::ErrorKind::BrokenPipe),
        })
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Data(e.into())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => Failure::Diverged(e.to_string()),
            TrainError::InvalidConfig(_) | TrainError::Tensor(_) => Failure::Usage(e.to_string()),
            TrainError::CorpusTooShort { .. } | TrainError::Checkpoint(_) => Failure::Data(e.into()),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! out {
    ($($t:tt)*) => {
        writeln!(io::stdout().lock(), $($t)*)?
    };
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_format(id: &str) -> Result<FloatSpec, Failure> {
    FloatSpec::from_id(id).map_err(|_| usage(format!("unknown format `{id}` (known: {})", FloatSpec::IDS.join(", "))))
}

fn parse_rounding(id: &str) -> Result<RoundingPolicy, Failure> {
    RoundingPolicy::parse(id).ok_or_else(|| usage(format!("unknown rounding `{id}` (nearest-away, nearest-even, truncate)")))
}

fn parse_acc(id: &str) -> Result<AccumulatorKind, Failure> {
    AccumulatorKind::parse(id).ok_or_else(|| usage(format!("unknown accumulator `{id}` (wide, exact, narrow)")))
}

fn precision(preset: &str, format: Option<&str>, acc: Option<&str>, rounding: Option<&str>) -> Result<PrecisionConfig, Failure> {
    let mut p = PrecisionConfig::preset(preset)
        .ok_or_else(|| usage(format!("unknown preset `{preset}` (known: {})", PRESET_NAMES.join(", "))))?;
    if let Some(f) = format {
        p = p.with_element(parse_format(f)?);
    }
    if let Some(a) = acc {
        p = p.with_accumulator(parse_acc(a)?);
    }
    if let Some(r) = rounding {
        p = p.with_rounding(parse_rounding(r)?);
    }
    p.validate().map_err(|e| usage(e.to_string()))?;
    Ok(p)
}

/// CSV sink on a file or stdout.
fn csv_writer(out: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>, Failure> {
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn load_corpus(path: Option<&Path>) -> Result<Vec<u8>, Failure> {
    match path {
        Some(p) => Ok(fs::read(p).with_context(|| format!("reading corpus {}", p.display()))?),
        None => Ok(train::SONNETS.as_bytes().to_vec()),
    }
}

pub fn inspect(format: Option<String>) -> CmdResult {
    let id = format.ok_or_else(|| usage("missing format id"))?;
    let s = parse_format(&id)?;
    let l = s.limits();
    out!("format         {}", s.id());
    out!("exponent bits  {}", s.exp_bits());
    out!("mantissa bits  {}", s.man_bits());
    out!("bias           {}", s.bias());
    out!("xi_max         {}", l.xi_max);
    out!("xi_min         {}", l.xi_min);
    out!("max normal     {}", l.max_normal);
    out!("min normal     {}", l.min_normal);
    out!("min subnormal  {}", if s.denorm() { l.min_subnormal.to_string() } else { "none".into() });
    out!("infinity       {}", if s.has_infinity() { "yes" } else { "no" });
    out!("exact width    {}", required_width(&s));
    Ok(())
}

pub fn presets() -> CmdResult {
    for name in PRESET_NAMES {
        let p = PrecisionConfig::preset(name).expect("listed preset");
        let matmul = match p.matmul_mode() {
            mx_core::MatmulMode::Direct => "direct".to_string(),
            mx_core::MatmulMode::OnlineMx { elem, block, acc } => format!("online mx-{elem}/{block} {}", acc.id()),
        };
        out!(
            "{name:<9} weights={} activations={} gradients={} adam={} master={} probs={} matmul={matmul}",
            p.weights.id(),
            p.activations.id(),
            p.gradients.id(),
            p.adam.id(),
            if p.master_copy { "yes" } else { "no" },
            if p.full_precision_probs { "f64" } else { "activations" },
        );
    }
    Ok(())
}

fn parse_numbers(text: &str) -> Result<Vec<f64>, Failure> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(i, t)| t.parse::<f64>().map_err(|_| Failure::Data(anyhow!("value {} is not a number: `{t}`", i + 1))))
        .collect()
}

pub fn quantize(a: &QuantizeArgs, args: &[String]) -> CmdResult {
    let spec = parse_format(&a.format)?.with_rounding(parse_rounding(&a.rounding)?);
    if a.block == 0 {
        return Err(usage("block length must be positive"));
    }
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let xs = parse_numbers(&text)?;
    let v = MxVector::from_slice(spec, a.block, &xs).map_err(|e| usage(e.to_string()))?;
    let mut w = csv_writer(a.out.as_deref())?;
    w.write_record(["block", "w", "max_abs_err", "mean_abs_err", "nan_count"])?;
    let mut total_nan = 0;
    let mut decoded = vec![0.0; a.block];
    for (j, chunk) in xs.chunks(a.block).enumerate() {
        let out = &mut decoded[..chunk.len()];
        v.decode_block(j, out);
        let mut max_err = 0.0f64;
        let mut sum_err = 0.0;
        let mut finite = 0;
        let mut nans = 0;
        for (&x, &y) in chunk.iter().zip(out.iter()) {
            if y.is_nan() {
                nans += 1;
            }
            if x.is_finite() && y.is_finite() {
                let e = (x - y).abs();
                max_err = max_err.max(e);
                sum_err += e;
                finite += 1;
            }
        }
        total_nan += nans;
        let mean = if finite == 0 { 0.0 } else { sum_err / finite as f64 };
        let scale = v.scales()[j].exp().map_or("nan".to_string(), |w| w.to_string());
        w.write_record([j.to_string(), scale, max_err.to_string(), mean.to_string(), nans.to_string()])?;
    }
    w.flush()?;
    drop(w);
    if total_nan > 0 {
        eprintln!("{total_nan} element(s) are NaN");
    }
    if let Some(out) = &a.out {
        let mut m = RunManifest::new("quantize", args);
        m.extra = Some(json!({ "input": a.input, "format": spec.id(), "block": a.block, "rounding": spec.rounding().id() }));
        m.write_for(out)?;
    }
    Ok(())
}

fn bench_vector(spec: FloatSpec, block: usize, n: usize, adversarial: bool, rng: &mut ChaCha8Rng) -> MxVector {
    if adversarial {
        let codes = vec![spec.max_finite_bits(); n];
        let scales = vec![ScaleExp::new(0); n.div_ceil(block)];
        return MxVector::from_parts(spec, block, codes, scales).expect("consistent parts");
    }
    let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    MxVector::from_slice(spec, block, &xs).expect("positive block")
}

pub fn bench_dot(a: &BenchArgs, args: &[String]) -> CmdResult {
    let spec = parse_format(&a.format)?;
    let acc = parse_acc(&a.acc)?;
    if a.block == 0 {
        return Err(usage("block length must be positive"));
    }
    check_accumulator(&spec, a.block, acc).map_err(|e| usage(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    // shared product tables are built on first use; keep that out of the timing
    let warm = MxVector::zeros(spec, a.block, a.block).expect("positive block");
    mx_dot(&warm, &warm, acc).map_err(|e| usage(e.to_string()))?;
    let mut rows = Vec::with_capacity(a.trials);
    let mut elapsed = 0.0;
    for _ in 0..a.trials {
        let x = bench_vector(spec, a.block, a.n, a.adversarial, &mut rng);
        let y = bench_vector(spec, a.block, a.n, false, &mut rng);
        let start = Instant::now();
        let got = mx_dot(&x, &y, acc).map_err(|e| usage(e.to_string()))?;
        if a.n > 0 {
            elapsed += start.elapsed().as_secs_f64();
        }
        let mut reference = ExactSum::new();
        reference.extend(x.to_vec().iter().zip(y.to_vec()).map(|(p, q)| p * q));
        rows.push((got, reference.value()));
    }
    let errs: Vec<f64> = rows.iter().filter(|(g, r)| g.is_finite() && r.is_finite()).map(|(g, r)| (g - r).abs()).collect();
    let overflows = rows.iter().filter(|(g, r)| !g.is_finite() && r.is_finite()).count();
    let max_err = errs.iter().copied().fold(0.0, f64::max);
    let mean_err = if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 };
    let per_dot = if a.trials == 0 { 0.0 } else { elapsed * 1e9 / a.trials as f64 };
    out!("format {}  block {}  acc {}  n {}  trials {}", spec.id(), a.block, acc.id(), a.n, a.trials);
    out!("time per dot   {per_dot:.0} ns");
    out!("max abs error  {max_err:e}");
    out!("mean abs error {mean_err:e}");
    out!("overflows      {overflows}");
    if let Some(out) = &a.out {
        let mut w = csv_writer(Some(out))?;
        w.write_record(["trial", "result", "reference", "abs_err"])?;
        for (i, (g, r)) in rows.iter().enumerate() {
            w.write_record([i.to_string(), g.to_string(), r.to_string(), (g - r).abs().to_string()])?;
        }
        w.flush()?;
        let mut m = RunManifest::new("bench-dot", args);
        m.seed = Some(a.seed);
        m.extra = Some(json!({
            "format": spec.id(), "block": a.block, "acc": acc.id(), "n": a.n,
            "trials": a.trials, "adversarial": a.adversarial,
        }));
        m.write_for(out)?;
    }
    Ok(())
}

fn run_config(a: &TrainArgs) -> RunConfig {
    let mut run = RunConfig::toy(a.iters, a.seed);
    run.batch = a.batch;
    run.seq_len = a.seq_len;
    if let Some(lr) = a.lr {
        run.optimizer.lr = lr;
    }
    run
}

fn train_manifest(command: &str, args: &[String], a: &TrainArgs, p: &PrecisionConfig) -> RunManifest {
    let mut m = RunManifest::new(command, args);
    m.preset = Some(a.preset.clone());
    m.precision = Some(*p);
    m.seed = Some(a.seed);
    m.iterations = Some(a.iters);
    m.corpus = a.corpus.clone();
    m.checkpoint = a.checkpoint.clone();
    m
}

fn progress(label: &str, iters: usize) -> impl FnMut(usize, f64) + '_ {
    move |it, loss| {
        if it % 10 == 0 || it + 1 == iters {
            eprintln!("{label}step {:>4}/{iters}  loss {loss:.4}", it + 1);
        }
    }
}

pub fn train(a: &TrainArgs, args: &[String]) -> CmdResult {
    let p = precision(&a.preset, a.format.as_deref(), a.acc.as_deref(), a.rounding.as_deref())?;
    let corpus = load_corpus(a.corpus.as_deref())?;
    let run = run_config(a);
    let model = Model::new(run.model, p, run.seed)?;
    let (model, losses) = train::finetune(model, &corpus, &run, progress("", a.iters))?;
    let mut w = csv_writer(a.out.as_deref())?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    drop(w);
    let manifest = train_manifest("train", args, a, &p);
    if let Some(out) = &a.out {
        manifest.write_for(out)?;
    }
    if let Some(ck) = &a.checkpoint {
        checkpoint::write(ck, &model.config, model.weights()).map_err(TrainError::from)?;
        manifest.write_for(ck)?;
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn compare_rounding(a: &TrainArgs, args: &[String]) -> CmdResult {
    let nearest_policy = match a.rounding.as_deref() {
        None => RoundingPolicy::TiesToAway,
        Some(r) => parse_rounding(r)?,
    };
    if nearest_policy == RoundingPolicy::Truncate {
        return Err(usage("--rounding picks the round-to-nearest variant; truncate is always run"));
    }
    let base = precision(&a.preset, a.format.as_deref(), a.acc.as_deref(), None)?;
    let corpus = load_corpus(a.corpus.as_deref())?;
    let run = run_config(a);
    let mut curves = Vec::new();
    for (label, policy) in [("truncate: ", RoundingPolicy::Truncate), ("to-nearest: ", nearest_policy)] {
        let p = base.with_rounding(policy);
        let model = Model::new(run.model, p, run.seed)?;
        let (_, losses) = train::finetune(model, &corpus, &run, progress(label, a.iters))?;
        curves.push(losses);
    }
    let mut w = csv_writer(a.out.as_deref())?;
    w.write_record(["iteration", "truncate", "to-nearest"])?;
    for (i, (t, n)) in curves[0].iter().zip(&curves[1]).enumerate() {
        w.write_record([i.to_string(), t.to_string(), n.to_string()])?;
    }
    w.flush()?;
    drop(w);
    let (mt, mn) = (mean(&curves[0]), mean(&curves[1]));
    eprintln!("mean loss: truncate {mt:.4}, to-nearest ({}) {mn:.4}", nearest_policy.id());
    if mn < mt {
        eprintln!("to-nearest trains to a lower mean loss");
    } else {
        eprintln!("note: to-nearest did not beat truncation on this run");
    }
    if let Some(out) = &a.out {
        let mut m = train_manifest("compare-rounding", args, a, &base);
        m.extra = Some(json!({
            "to_nearest_policy": nearest_policy.id(),
            "mean_truncate": mt,
            "mean_to_nearest": mn,
        }));
        m.write_for(out)?;
    }
    Ok(())
}

fn parse_tokens(s: &str) -> Result<Vec<u32>, Failure> {
    s.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|_| usage(format!("bad token id `{t}`"))))
        .collect()
}

pub fn generate(a: &GenerateArgs, args: &[String]) -> CmdResult {
    let p = precision(&a.preset, a.format.as_deref(), a.acc.as_deref(), a.rounding.as_deref())?;
    let ck = checkpoint::read(&a.checkpoint).map_err(|e| Failure::Data(anyhow!("{}: {e}", a.checkpoint.display())))?;
    let model = Model::from_weights(ck.config, p, ck.weights)?;
    let prompt = match &a.tokens {
        Some(t) => parse_tokens(t)?,
        None => train::encode_bytes(a.prompt.as_bytes()),
    };
    let out = train::generate(&model, &prompt, a.n, a.temperature, a.seed)?;
    if model.config.vocab == 256 && a.tokens.is_none() {
        out!("{}{}", a.prompt, train::decode_bytes(&out));
    } else {
        out!("{}", out.iter().map(u32::to_string).collect::<Vec<_>>().join(","));
    }
    let mut window: Vec<u32> = prompt.iter().chain(&out).copied().collect();
    let ctx = model.config.max_seq_len;
    if window.len() > ctx {
        window.drain(..window.len() - ctx);
    }
    let reference = model.with_precision(PrecisionConfig::preset("baseline").expect("baseline preset"))?;
    let kl = train::next_token_kl(&reference, &model, &window)?;
    eprintln!("next-token KL vs baseline: {kl:.6}");
    if let Some(path) = &a.out {
        let body: String = out.iter().map(|t| format!("{t}\n")).collect();
        fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
        let mut m = RunManifest::new("generate", args);
        m.preset = Some(a.preset.clone());
        m.precision = Some(p);
        m.seed = Some(a.seed);
        m.checkpoint = Some(PathBuf::from(&a.checkpoint));
        m.extra = Some(json!({ "temperature": a.temperature, "tokens": a.n, "kl_vs_baseline": kl }));
        m.write_for(path)?;
    }
    Ok(())
}
