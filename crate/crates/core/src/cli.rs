//! The pipeline commands behind the `qdiff` binary: train, qat, ptq, sample,
//! eval and bench. Each reads a [`RunConfig`] and writes its artifacts into
//! `config.output_dir`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::diffusion::{sample, train_model, ModelSet, NoiseSchedule, SampleOptions};
use crate::error::{Error, Result};
use crate::eval::report::{self, KernelBenchRow, QualityRow};
use crate::eval::{
    bench_latency, default_matrix, evaluate_config, image_stats, quantile, time_repeats, BenchConfig, BenchReport,
    DatasetConfig, FeatureProjection, ToyDataset,
};
use crate::kernels::gemm::{igemm, sgemm};
use crate::kernels::{fused_mha, groupnorm_baseline, groupnorm_channel_parallel, GroupNormSpec, WorkerPool};
use crate::numerics::PrecisionFormat;
use crate::qat::{calibrate_ptq, init_qat, run_qat};
use crate::tensor::Tensor;
use crate::unet::{load_checkpoint, param_hash, save_checkpoint, InferenceModel, UnetModel};

pub const TEACHER_FILE: &str = "teacher.qdck";
pub const STUDENT_FILE: &str = "student.qdck";
pub const PTQ_FILE: &str = "ptq.qdck";

/// Exit status for an error: 2 for configuration problems, 3 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        _ => 3,
    }
}

/// Single-line JSON error report.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } }).to_string()
}

pub fn worker_pool(config: &RunConfig) -> Result<WorkerPool> {
    match config.threads {
        Some(t) => WorkerPool::new(t),
        None => Ok(WorkerPool::with_available_parallelism()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { out: BufWriter::new(file), path })
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

// ---- PGM ------------------------------------------------------------------

/// Maps `[-1, 1]` to `0..=255`, clamping outside values.
pub fn to_gray(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Binary (P5) 8-bit grayscale image.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_pgm", format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| to_gray(v)));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a P5 image written by [`write_pgm`]: `(width, height, bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::InvalidArgument(format!("{}: not a binary 8-bit PGM", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    let (w, h): (usize, usize) = (fields[1].parse().map_err(|_| bad())?, fields[2].parse().map_err(|_| bad())?);
    if fields[0] != "P5" || fields[3] != "255" || bytes.len() != pos + 1 + w * h {
        return Err(bad());
    }
    Ok((w, h, bytes[pos + 1..].to_vec()))
}

// ---- train / qat / ptq ----------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub final_loss: Option<f32>,
    pub param_hash: String,
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    ensure_dir(&config.output_dir)?;
    let data = ToyDataset::generate(&config.dataset)?;
    let schedule = NoiseSchedule::new(&config.schedule)?;
    let mut log = JsonLines::create(config.output_dir.join("train_log.jsonl"))?;
    let mut final_loss = None;
    let model = train_model(&config.unet, &config.train, data.images(), &schedule, |step, loss, lr| {
        final_loss = Some(loss);
        log.write(&serde_json::json!({ "step": step, "loss": loss, "lr": lr }))
    })?;
    log.finish()?;
    let checkpoint = config.output_dir.join(TEACHER_FILE);
    save_checkpoint(&model, &checkpoint)?;
    Ok(TrainOutcome { checkpoint, steps: config.train.steps, final_loss, param_hash: param_hash(model.params()) })
}

#[derive(Clone, Debug, Serialize)]
pub struct QatOutcome {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub teacher_hash: String,
    pub final_task_loss: Option<f32>,
    pub final_kd_loss: Option<f32>,
}

/// QAT with distillation from `teacher`. Fails if the teacher's parameters
/// changed during training.
pub fn cmd_qat(config: &RunConfig, pool: &WorkerPool, teacher: &Path) -> Result<QatOutcome> {
    ensure_dir(&config.output_dir)?;
    let pretrained = load_checkpoint(teacher)?;
    let before = param_hash(pretrained.params());
    let data = ToyDataset::generate(&config.dataset)?;
    let schedule = NoiseSchedule::new(&config.schedule)?;
    let mut state = init_qat(&pretrained, config.qat.clone(), pool.clone())?;
    let mut log = JsonLines::create(config.output_dir.join("qat_log.jsonl"))?;
    let mut write_err = None;
    let logs = run_qat(&mut state, data.images(), &schedule, |entry| {
        if write_err.is_none() {
            write_err = log.write(entry).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    log.finish()?;
    let after = param_hash(state.teacher().params());
    if after != before {
        return Err(Error::Numerical(format!("teacher parameters changed during QAT ({before} -> {after})")));
    }
    let checkpoint = config.output_dir.join(STUDENT_FILE);
    save_checkpoint(&state.into_student(), &checkpoint)?;
    Ok(QatOutcome {
        checkpoint,
        steps: logs.len(),
        teacher_hash: before,
        final_task_loss: logs.last().map(|l| l.task_loss),
        final_kd_loss: logs.last().map(|l| l.kd_loss),
    })
}

/// Post-training quantization baseline: calibrate observers, no training.
pub fn cmd_ptq(config: &RunConfig, teacher: &Path) -> Result<PathBuf> {
    ensure_dir(&config.output_dir)?;
    let pretrained = load_checkpoint(teacher)?;
    let data = ToyDataset::generate(&config.dataset)?;
    let schedule = NoiseSchedule::new(&config.schedule)?;
    let model = calibrate_ptq(
        &pretrained,
        data.images(),
        &schedule,
        config.eval.ptq_batches,
        config.qat.batch_size,
        config.eval.ptq_seed,
    )?;
    let checkpoint = config.output_dir.join(PTQ_FILE);
    save_checkpoint(&model, &checkpoint)?;
    Ok(checkpoint)
}

// ---- sample ---------------------------------------------------------------

/// Teacher for FP32/BF16 steps, optional quantized student for INT8 steps.
pub fn load_model_set(teacher: &Path, student: Option<&Path>, pool: &WorkerPool) -> Result<ModelSet> {
    let full = InferenceModel::new(load_checkpoint(teacher)?, pool.clone())?;
    let quantized = match student {
        Some(p) => Some(InferenceModel::new(load_checkpoint(p)?, pool.clone())?),
        None => None,
    };
    Ok(ModelSet { full, quantized })
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleManifest {
    pub seed: u64,
    pub count: usize,
    pub steps: usize,
    pub boundary: usize,
    pub formats: Vec<PrecisionFormat>,
    pub timesteps: Vec<usize>,
    pub teacher_hash: String,
    pub student_hash: Option<String>,
    pub images: Vec<String>,
}

/// Generates `count` images with the configured policy and writes them as
/// PGM files plus a `samples.json` manifest under `output_dir/samples`.
pub fn cmd_sample(
    config: &RunConfig,
    pool: &WorkerPool,
    teacher: &Path,
    student: Option<&Path>,
    count: usize,
    seed: u64,
) -> Result<SampleManifest> {
    let policy = config.policy.policy()?;
    if student.is_none() && policy.formats().contains(&PrecisionFormat::Int8) {
        return Err(Error::Config(format!(
            "policy runs {} steps in int8 but no student checkpoint was given",
            policy.formats().iter().filter(|f| **f == PrecisionFormat::Int8).count()
        )));
    }
    let models = load_model_set(teacher, student, pool)?;
    let schedule = NoiseSchedule::new(&config.schedule)?;
    let u = models.full.model().config();
    let (c, s) = (u.in_channels, u.image_size);
    let out = sample(&models, &policy, &schedule, [c, s, s], count, seed, &SampleOptions::default())?;
    let dir = config.output_dir.join("samples");
    ensure_dir(&dir)?;
    let per = c * s * s;
    let mut names = Vec::with_capacity(count);
    for (i, img) in out.images.data().chunks_exact(per).enumerate() {
        for (ch, plane) in img.chunks_exact(s * s).enumerate() {
            let name = if c == 1 { format!("{i:04}.pgm") } else { format!("{i:04}_c{ch}.pgm") };
            write_pgm(&dir.join(&name), s, s, plane)?;
            names.push(name);
        }
    }
    let manifest = SampleManifest {
        seed,
        count,
        steps: policy.n,
        boundary: policy.k,
        formats: out.formats,
        timesteps: out.timesteps,
        teacher_hash: param_hash(models.full.model().params()),
        student_hash: models.quantized.as_ref().map(|q| param_hash(q.model().params())),
        images: names,
    };
    let path = dir.join("samples.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

// ---- eval -----------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub qat: f64,
    pub ptq: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutcome {
    pub rows: Vec<QualityRow>,
    pub qat_vs_ptq: Option<Vec<SeedComparison>>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// Fréchet distance of every default-matrix configuration over the
/// configured seeds. With `ptq`, also compares the INT8 student against the
/// calibration-only model seed by seed.
pub fn cmd_eval(
    config: &RunConfig,
    pool: &WorkerPool,
    teacher: &Path,
    student: &Path,
    ptq: Option<&Path>,
) -> Result<EvalOutcome> {
    ensure_dir(&config.output_dir)?;
    let models = load_model_set(teacher, Some(student), pool)?;
    let schedule = NoiseSchedule::new(&config.schedule)?;
    let data = ToyDataset::generate(&config.dataset)?;
    let u = models.full.model().config();
    let image = [u.in_channels, u.image_size, u.image_size];
    let projection = FeatureProjection::standard(image.iter().product())?;
    let reference = image_stats(data.images(), &projection)?;
    let eval = &config.eval;

    let mut rows = Vec::new();
    let mut int8_fds = Vec::new();
    for c in default_matrix(config.policy.steps)? {
        let fds = eval
            .seeds
            .iter()
            .map(|&seed| {
                evaluate_config(&models, &c.policy, &schedule, &reference, &projection, image, eval.images, seed)
            })
            .collect::<Result<Vec<f64>>>()?;
        if c.policy.formats().iter().all(|f| *f == PrecisionFormat::Int8) {
            int8_fds = fds.clone();
        }
        rows.push(QualityRow {
            label: c.label.clone(),
            precision_mix: c.precision_mix(),
            steps: c.policy.n,
            k: c.policy.k,
            median_frechet: median(&fds),
            per_seed: fds.iter().map(|f| format!("{f:.6}")).collect::<Vec<_>>().join(";"),
        });
    }
    report::write_text(&config.output_dir.join("quality.csv"), &report::quality_csv(&rows)?)?;
    report::write_text(&config.output_dir.join("quality.md"), &report::quality_markdown(&rows))?;

    let qat_vs_ptq = match ptq {
        None => None,
        Some(p) => {
            let ptq_models = load_model_set(teacher, Some(p), pool)?;
            let policy = crate::diffusion::PrecisionPolicy::uniform(config.policy.steps, PrecisionFormat::Int8)?;
            let mut out = Vec::new();
            for (&seed, &qat) in eval.seeds.iter().zip(&int8_fds) {
                let ptq = evaluate_config(
                    &ptq_models,
                    &policy,
                    &schedule,
                    &reference,
                    &projection,
                    image,
                    eval.images,
                    seed,
                )?;
                out.push(SeedComparison { seed, qat, ptq });
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &out {
                w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
            }
            let text = String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?)
                .expect("csv output is utf-8");
            report::write_text(&config.output_dir.join("qat_vs_ptq.csv"), &text)?;
            Some(out)
        }
    };
    Ok(EvalOutcome { rows, qat_vs_ptq })
}

// ---- bench ----------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct BenchOutcome {
    pub latency: BenchReport,
    pub kernels: Vec<KernelBenchRow>,
}

/// A randomly initialized network of the benchmark shape and its
/// calibrated INT8 counterpart. Latency does not depend on trained weights.
pub fn bench_models(config: &RunConfig, pool: &WorkerPool, seed: u64) -> Result<ModelSet> {
    let unet = &config.bench.unet;
    let teacher = UnetModel::new(unet.clone(), seed)?;
    let data = ToyDataset::generate(&DatasetConfig { seed, count: 16, image_size: unet.image_size })?;
    let schedule = NoiseSchedule::new(&config.schedule)?;
    let student = calibrate_ptq(&teacher, data.images(), &schedule, 2, 8, seed)?;
    Ok(ModelSet {
        full: InferenceModel::new(teacher, pool.clone())?,
        quantized: Some(InferenceModel::new(student, pool.clone())?),
    })
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::randn(shape, 1.0, rng)
}

/// GroupNorm (both decompositions), f32 and INT8 GEMM, and fused attention.
pub fn kernel_benchmarks(config: &RunConfig, pool: &WorkerPool, seed: u64) -> Result<Vec<KernelBenchRow>> {
    let b = &config.bench;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let threads = pool.threads();
    let mut rows = Vec::new();

    let [n, c, h, w] = b.groupnorm_shape;
    let x = random_tensor(vec![n, c, h, w], &mut rng)?;
    let spec = GroupNormSpec::plain(c, b.groupnorm_groups, crate::kernels::groupnorm::DEFAULT_EPS)?;
    let shape = format!("N={n} C={c} H={h} W={w} G={}", b.groupnorm_groups);
    let (t, _) = time_repeats(1, b.kernel_repeats, || groupnorm_baseline(&x, &spec, pool).map(drop))?;
    rows.push(KernelBenchRow::new("groupnorm_group_parallel", shape.clone(), threads, t));
    let (t, _) = time_repeats(1, b.kernel_repeats, || groupnorm_channel_parallel(&x, &spec, pool).map(drop))?;
    rows.push(KernelBenchRow::new("groupnorm_channel_parallel", shape, threads, t));

    let dim = 256;
    let a = random_tensor(vec![dim, dim], &mut rng)?;
    let bm = random_tensor(vec![dim, dim], &mut rng)?;
    let mut out = vec![0.0f32; dim * dim];
    let (t, _) = time_repeats(1, b.kernel_repeats, || {
        sgemm(dim, dim, dim, a.data(), bm.data(), &mut out, false);
        Ok(())
    })?;
    rows.push(KernelBenchRow::new("sgemm", format!("{dim}x{dim}x{dim}"), 1, t));
    let qa: Vec<i8> = a.data().iter().map(|v| (v * 40.0).clamp(-127.0, 127.0) as i8).collect();
    let qb: Vec<i8> = bm.data().iter().map(|v| (v * 40.0).clamp(-127.0, 127.0) as i8).collect();
    let mut acc = vec![0i32; dim * dim];
    let (t, _) = time_repeats(1, b.kernel_repeats, || {
        igemm(dim, dim, dim, &qa, &qb, &mut acc);
        Ok(())
    })?;
    rows.push(KernelBenchRow::new("igemm", format!("{dim}x{dim}x{dim}"), 1, t));

    let (heads, len, d) = (4, 256, 32);
    let q = random_tensor(vec![1, heads, len, d], &mut rng)?;
    let k = random_tensor(vec![1, heads, len, d], &mut rng)?;
    let v = random_tensor(vec![1, heads, len, d], &mut rng)?;
    let (t, _) = time_repeats(1, b.kernel_repeats, || fused_mha(&q, &k, &v, pool).map(drop))?;
    rows.push(KernelBenchRow::new("fused_mha", format!("heads={heads} L={len} d={d}"), threads, t));
    Ok(rows)
}

/// Per-sample latency of the default matrix on the benchmark network, plus
/// kernel micro-benchmarks. Writes `latency.csv`, `latency.md` and
/// `kernels.csv`.
pub fn cmd_bench(config: &RunConfig, pool: &WorkerPool, seed: u64) -> Result<BenchOutcome> {
    ensure_dir(&config.output_dir)?;
    let models = bench_models(config, pool, seed)?;
    let schedule = NoiseSchedule::new(&config.schedule)?;
    let u = &config.bench.unet;
    let bench =
        BenchConfig { warmup: config.bench.warmup, repeats: config.bench.repeats, batch: config.bench.batch, seed };
    let matrix = default_matrix(config.policy.steps)?;
    let latency = bench_latency(&models, &matrix, &schedule, [u.in_channels, u.image_size, u.image_size], &bench)?;
    let kernels = kernel_benchmarks(config, pool, seed)?;
    report::write_text(&config.output_dir.join("latency.csv"), &report::latency_csv(&latency)?)?;
    report::write_text(&config.output_dir.join("latency.md"), &report::latency_markdown(&latency))?;
    report::write_text(&config.output_dir.join("kernels.csv"), &report::kernel_csv(&kernels)?)?;
    Ok(BenchOutcome { latency, kernels })
}
