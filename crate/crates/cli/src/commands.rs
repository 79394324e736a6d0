use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use flatmae::data::{load_run, run_from_bytes, save_run, Loader, LoaderConfig, Shard, FMRUN_MAGIC, FMSHRD_MAGIC};
use flatmae::evalprobe::{
    connectome_features, run_sweep, AttentiveProbe, LinearProbe, ParcelMap, PatchEmbedProbe, Probe, ProbeConfig,
    ProbeInput, ProbeSet, SweepResult,
};
use flatmae::flatgeo::{load_mesh, FlatMesh, ResampleGrid, FGRID_MAGIC, FMESH_MAGIC};
use flatmae::mae::{reconstruct, Checkpoint, TrainConfig, Trainer, FMCKPT_MAGIC};
use flatmae::prep::{extract_clips, preprocess_run, FlatClip, SurfaceRun};
use flatmae::render::{encode_png, render_triptych, RenderOptions};
use flatmae::scalefit::{fit_power_law, predict, read_traces_csv, relative_residual, select_points, PowerLawFit};
use flatmae::synth::{SynthSpec, SynthWorld};
use flatmae::token::{build_layout, make_mask, make_mask_with_count, patchify, PatchLayout};
use flatmae::{rng, Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::resolve::{echo, expand, load, parent_dir, set};
use crate::{
    BuildGridArgs, FeatureKind, FitScalingArgs, InfoArgs, MakeSynthArgs, PretrainArgs, ProbeArgs, RenderArgs,
    ResampleArgs,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub pixel_mm: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, pixel_mm: 1.25 }
    }
}

pub fn build_grid(a: BuildGridArgs, cfg: Option<&Path>) -> Result<()> {
    let mut c: GridConfig = load(cfg)?;
    set(&mut c.height, a.height);
    set(&mut c.width, a.width);
    set(&mut c.pixel_mm, a.pixel_mm);
    echo(&parent_dir(&a.out), "build-grid", &c)?;
    let mesh = load_mesh(&a.mesh)?;
    let grid = flatmae::flatgeo::build_grid(&mesh, c.height, c.width, c.pixel_mm)?;
    grid.save(&a.out)?;
    println!(
        "grid {}x{} at {} mm: {} valid pixels, hash {}",
        c.height,
        c.width,
        c.pixel_mm,
        grid.n_valid(),
        hex::encode(grid.hash())
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub synth: SynthSpec,
    pub runs_per_class: usize,
    pub grid_size: Option<usize>,
    /// Defaults to a pixel size that fits the whole disc.
    pub pixel_mm: Option<f64>,
    pub tr_out: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { synth: SynthSpec::default(), runs_per_class: 6, grid_size: None, pixel_mm: None, tr_out: 1.0 }
    }
}

/// Split of the `i`-th run of a class: every fifth run goes to validation,
/// the next to test.
fn split_of(i: usize) -> &'static str {
    match i % 5 {
        3 => "val",
        4 => "test",
        _ => "train",
    }
}

fn write_shards(runs: &[SurfaceRun], grid: &ResampleGrid, tr_out: f64, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = grid.hash();
    runs.par_iter().try_for_each(|run| {
        let frames = preprocess_run(run, grid, tr_out)?;
        let clip = FlatClip::from_frames(&frames, 0.0)?;
        Shard::from_clip(&clip, tr_out, &run.subject_id, &run.run_id, hash)
            .save(dir.join(format!("{}.fmshrd", run.run_id)))
    })
}

pub fn make_synth(a: MakeSynthArgs, cfg: Option<&Path>) -> Result<()> {
    let mut c: SynthConfig = load(cfg)?;
    set(&mut c.synth.seed, a.seed);
    set(&mut c.synth.snr, a.snr);
    set(&mut c.synth.n_vertices, a.n_vertices);
    set(&mut c.synth.n_times, a.n_times);
    set(&mut c.synth.tr, a.tr);
    set(&mut c.runs_per_class, a.runs_per_class);
    if a.grid_size.is_some() {
        c.grid_size = a.grid_size;
    }
    if a.pixel_mm.is_some() {
        c.pixel_mm = a.pixel_mm;
    }
    if let Some(n) = c.grid_size {
        c.pixel_mm.get_or_insert(2.05 * c.synth.radius_mm / n as f64);
    }
    echo(&a.out, "make-synth", &c)?;

    let world = SynthWorld::new(c.synth.clone())?;
    world.mesh.save(a.out.join("mesh.fmesh"))?;
    let classes = c.synth.classes();
    let n_runs = classes * c.runs_per_class;
    let runs: Vec<(SurfaceRun, usize, &str)> = (0..n_runs)
        .into_par_iter()
        .map(|k| {
            let class = k % classes;
            let (run, _) = world.make_run(class, k as u64)?;
            Ok((run, class, split_of(k / classes)))
        })
        .collect::<Result<_>>()?;

    let run_dir = a.out.join("runs");
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let mut labels = String::from("run_id,label,split\n");
    for (run, class, split) in &runs {
        save_run(run, run_dir.join(format!("{}.fmrun", run.run_id)))?;
        labels.push_str(&format!("{},{class},{split}\n", run.run_id));
    }
    let lp = a.out.join("labels.csv");
    std::fs::write(&lp, labels).map_err(|e| Error::io(&lp, e))?;

    if let (Some(n), Some(mm)) = (c.grid_size, c.pixel_mm) {
        let grid = flatmae::flatgeo::build_grid(&world.mesh, n, n, mm)?;
        grid.save(a.out.join("grid.fgrid"))?;
        let runs: Vec<SurfaceRun> = runs.into_iter().map(|r| r.0).collect();
        write_shards(&runs, &grid, c.tr_out, &a.out.join("shards"))?;
    }
    println!("{n_runs} runs of {} classes written to {}", classes, a.out.display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ResampleConfig {
    pub tr_out: f64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self { tr_out: 1.0 }
    }
}

pub fn resample(a: ResampleArgs, cfg: Option<&Path>) -> Result<()> {
    let mut c: ResampleConfig = load(cfg)?;
    set(&mut c.tr_out, a.tr_out);
    echo(&a.out, "resample", &c)?;
    let grid = ResampleGrid::load(&a.grid)?;
    let runs = expand(&a.runs, "fmrun")?.iter().map(load_run).collect::<Result<Vec<_>>>()?;
    write_shards(&runs, &grid, c.tr_out, &a.out)?;
    println!("{} shards written to {}", runs.len(), a.out.display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub steps: u64,
    pub workers: usize,
    pub capacity: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let train = TrainConfig { warmup_steps: 10, total_steps: 200, ..TrainConfig::default() };
        Self { train, steps: 200, workers: 1, capacity: LoaderConfig::default().capacity }
    }
}

fn layout_for(grid: &ResampleGrid, t: &TrainConfig) -> Result<PatchLayout> {
    build_layout(grid.mask(), t.model.p_t, t.model.p, t.clip_len)
}

pub fn pretrain(a: PretrainArgs, cfg: Option<&Path>, threads: Option<usize>) -> Result<()> {
    let grid = ResampleGrid::load(&a.grid)?;
    let resumed = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let mut c: PretrainConfig = load(cfg)?;
    if let Some(ck) = &resumed {
        ck.check_grid(&grid.hash())?;
        c.train = ck.header.config.clone();
    } else {
        let t = &mut c.train;
        set(&mut t.seed, a.seed);
        set(&mut t.batch_size, a.batch_size);
        set(&mut t.base_lr, a.base_lr);
        set(&mut t.warmup_steps, a.warmup_steps);
        set(&mut t.mask_ratio, a.mask_ratio);
        if a.num_visible.is_some() {
            t.num_visible = a.num_visible;
        }
        set(&mut t.model.p_t, a.p_t);
        set(&mut t.model.p, a.patch);
        set(&mut t.clip_len, a.clip_len);
    }
    if let Some(lc) = resumed.as_ref().and_then(|ck| ck.header.loader.as_ref()) {
        c.capacity = lc.capacity;
        c.workers = lc.workers;
    }
    set(&mut c.steps, a.steps);
    set(&mut c.workers, a.workers);
    set(&mut c.capacity, a.capacity);
    if let Some(n) = threads {
        c.workers = c.workers.min(n);
    }
    if resumed.is_none() && c.train.total_steps < c.steps {
        c.train.total_steps = c.steps;
    }
    c.train.validate()?;
    echo(&a.out, "pretrain", &c)?;

    let layout = layout_for(&grid, &c.train)?;
    let mut trainer = match resumed {
        Some(ck) => ck.into_trainer(layout)?,
        None => Trainer::new(c.train.clone(), layout)?,
    };
    let start = trainer.step();
    let lc = LoaderConfig {
        batch_size: c.train.batch_size,
        capacity: c.capacity,
        workers: c.workers,
        clip_len: c.train.clip_len,
        seed: c.train.seed,
    };
    let mut loader = Loader::new(expand(&a.shards, "fmshrd")?, grid.clone(), lc.clone())?;
    for _ in 0..start {
        loader.next_batch()?;
    }
    log::info!("pretraining {} -> {} steps on {} tokens per clip", start, c.steps, trainer.layout.n_tokens());
    let t0 = std::time::Instant::now();
    let todo = c.steps.saturating_sub(start);
    trainer.pretrain(&mut loader, todo)?;
    let stats = loader.stats();
    log::info!(
        "{todo} steps in {:.1}s; {} shards read, {} failed, {} clips produced",
        t0.elapsed().as_secs_f64(),
        stats.shards_read,
        stats.shards_failed,
        stats.clips_produced
    );

    let mut csv = String::from("step,loss,lr\n");
    for (i, l) in trainer.trace.iter().enumerate() {
        let step = start + i as u64;
        csv.push_str(&format!("{step},{l},{}\n", c.train.lr_at(step)));
    }
    let lp = a.out.join("loss.csv");
    std::fs::write(&lp, csv).map_err(|e| Error::io(&lp, e))?;
    let mut ck = Checkpoint::from_trainer(&trainer, Some(grid.hash()));
    ck.header.loader = Some(lc);
    ck.save(a.out.join("checkpoint.fmckpt"))?;
    if let Some(l) = trainer.trace.last() {
        println!("step {} loss {l:.6}", trainer.step());
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeCmdConfig {
    pub probe: ProbeConfig,
    pub features: FeatureKind,
    pub parcels: usize,
    pub clip_len: usize,
    /// Patch-embedding baseline width and patch sizes (taken from the
    /// checkpoint when one is given).
    pub embed_dim: usize,
    pub p_t: usize,
    pub p: usize,
}

impl Default for ProbeCmdConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            features: FeatureKind::Mae,
            parcels: 400,
            clip_len: 16,
            embed_dim: 64,
            p_t: 16,
            p: 16,
        }
    }
}

fn read_labels(path: &Path) -> Result<HashMap<String, (usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let [run, label, split] = f[..] else {
            return Err(Error::Format(format!("{} line {}: expected run_id,label,split", path.display(), i + 1)));
        };
        let label =
            label.parse().map_err(|_| Error::Format(format!("{} line {}: bad label", path.display(), i + 1)))?;
        if !matches!(split, "train" | "val" | "test") {
            return Err(Error::Format(format!("{} line {}: unknown split {split}", path.display(), i + 1)));
        }
        out.insert(run.to_string(), (label, split.to_string()));
    }
    Ok(out)
}

fn sweep<P: Probe>(
    init: impl Fn() -> Result<P> + Sync,
    cfg: &ProbeConfig,
    sets: &[ProbeSet; 3],
) -> Result<SweepResult> {
    Ok(run_sweep(init, cfg, &sets[0], &sets[1], &sets[2])?.0)
}

pub fn probe(a: ProbeArgs, cfg: Option<&Path>) -> Result<()> {
    let mut c: ProbeCmdConfig = load(cfg)?;
    set(&mut c.features, a.features);
    set(&mut c.probe.epochs, a.epochs);
    set(&mut c.probe.batch_size, a.batch_size);
    set(&mut c.probe.lr_scales, a.lr_scales);
    set(&mut c.probe.weight_decays, a.weight_decays);
    set(&mut c.probe.heads, a.heads);
    set(&mut c.probe.seed, a.seed);
    set(&mut c.parcels, a.parcels);
    set(&mut c.clip_len, a.clip_len);
    let grid = ResampleGrid::load(&a.grid)?;
    let ck = a.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &ck {
        ck.check_grid(&grid.hash())?;
        let t = &ck.header.config;
        (c.clip_len, c.p_t, c.p) = (t.clip_len, t.model.p_t, t.model.p);
    } else if c.features == FeatureKind::Mae {
        return Err(Error::Config("--features mae needs --checkpoint".into()));
    }
    c.probe.validate()?;
    echo(&a.out, "probe", &c)?;

    let labels = read_labels(&a.labels)?;
    let layout = build_layout(grid.mask(), c.p_t, c.p, c.clip_len)?;
    let parcels = match c.features {
        FeatureKind::Connectome => {
            Some(ParcelMap::voronoi(grid.mask().clone(), c.parcels.min(grid.n_valid()), c.probe.seed)?)
        }
        _ => None,
    };
    let mut sets: [ProbeSet; 3] = Default::default();
    for path in expand(&a.shards, "fmshrd")? {
        let shard = Shard::load(&path)?;
        let Some((label, split)) = labels.get(&shard.run_id) else {
            log::warn!("no label for run {}; skipped", shard.run_id);
            continue;
        };
        let video = shard.to_clip(&grid)?;
        let starts: Vec<usize> = (0..video.n_frames / c.clip_len).map(|i| i * c.clip_len).collect();
        let set = &mut sets[["train", "val", "test"].iter().position(|s| s == split).unwrap()];
        for clip in extract_clips(&video, c.clip_len, &starts)? {
            let x = match c.features {
                FeatureKind::Mae => {
                    let ck = ck.as_ref().unwrap();
                    ProbeInput::encoded(&ck.params, &ck.header.config.model, &patchify(&clip, &layout)?)?
                }
                FeatureKind::PatchEmbed => ProbeInput::from_patches(&patchify(&clip, &layout)?),
                FeatureKind::Connectome => ProbeInput::vector(connectome_features(&clip, parcels.as_ref().unwrap())?),
            };
            set.push(x, *label);
        }
    }
    let classes = sets.iter().flat_map(|s| s.labels.iter()).max().map_or(0, |m| m + 1);
    log::info!("{} train / {} val / {} test clips, {classes} classes", sets[0].len(), sets[1].len(), sets[2].len());
    let dim = sets[0].inputs.first().map_or(0, |x| x.dim());
    let pc = &c.probe;
    let result = match c.features {
        FeatureKind::Mae => {
            sweep(|| AttentiveProbe::new(dim, classes, pc.heads, &mut rng::seeded(pc.seed)), pc, &sets)?
        }
        FeatureKind::PatchEmbed => sweep(
            || {
                let mut r = rng::seeded(pc.seed);
                PatchEmbedProbe::new(dim, layout.grid_t, layout.n_spatial(), c.embed_dim, classes, pc.heads, &mut r)
            },
            pc,
            &sets,
        )?,
        FeatureKind::Connectome => sweep(|| Ok(LinearProbe::new(dim, classes)), pc, &sets)?,
    };
    let csv_path = a.out.join("sweep.csv");
    let mut f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    result.write_csv(&mut f).map_err(|e| Error::io(&csv_path, e))?;
    let res_path = a.out.join("result.json");
    std::fs::write(&res_path, serde_json::to_string_pretty(&result)? + "\n").map_err(|e| Error::io(&res_path, e))?;
    let best = &result.rows[result.best];
    println!(
        "best lr x{} wd {}: val {:.4} test {:.4}",
        best.point.lr_scale, best.point.weight_decay, best.val_acc, result.test_acc
    );
    Ok(())
}

#[derive(Serialize)]
struct FitRecord {
    fit: PowerLawFit,
    points: Vec<FitPoint>,
}

#[derive(Serialize)]
struct FitPoint {
    n: f64,
    loss: f64,
    epoch: usize,
    predicted: f64,
    relative_residual: f64,
    held_out: bool,
}

pub fn fit_scaling(a: FitScalingArgs) -> Result<()> {
    let points = select_points(&read_traces_csv(&a.csv)?)?;
    let fit = fit_power_law(&points, a.first_k)?;
    let mut sorted = points.clone();
    sorted.sort_by(|x, y| x.n.total_cmp(&y.n));
    let points = sorted
        .iter()
        .enumerate()
        .map(|(i, p)| FitPoint {
            n: p.n,
            loss: p.loss,
            epoch: p.epoch,
            predicted: predict(&fit, p.n),
            relative_residual: relative_residual(&fit, p),
            held_out: i >= fit.n_points,
        })
        .collect();
    let text = serde_json::to_string_pretty(&FitRecord { fit, points })? + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, &text).map_err(|e| Error::io(p, e))?,
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?,
    }
    log::info!("loss = {:.6} * n^{:.6}, r2 {:.6}", fit.a, fit.b, fit.r2);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RenderConfig {
    pub sample: usize,
    pub seed: u64,
    pub options: RenderOptions,
}

pub fn render(a: RenderArgs, cfg: Option<&Path>) -> Result<()> {
    let mut c: RenderConfig = load(cfg)?;
    set(&mut c.sample, a.sample);
    set(&mut c.seed, a.seed);
    set(&mut c.options.zoom, a.zoom);
    if let Some(f) = a.frames {
        c.options.frames = f.try_into().map_err(|_| Error::Config("--frames takes exactly three indices".into()))?;
    }
    echo(&parent_dir(&a.out), "render", &c)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let grid = ResampleGrid::load(&a.grid)?;
    ck.check_grid(&grid.hash())?;
    let t = &ck.header.config;
    let layout = layout_for(&grid, t)?;
    let video = Shard::load(&a.shard)?.to_clip(&grid)?;
    let clip = extract_clips(&video, t.clip_len, &[c.sample * t.clip_len])?.remove(0);
    let plan = match t.num_visible {
        Some(n) => make_mask_with_count(&layout, n, c.seed)?,
        None => make_mask(&layout, t.mask_ratio, c.seed)?,
    };
    let pred = reconstruct(&ck.params, &t.model, &layout, &clip, &plan)?;
    let img = render_triptych(&layout, &plan, &pred, &clip, &c.options)?;
    let bytes = encode_png(&img)?;
    std::fs::write(&a.out, bytes).map_err(|e| Error::io(&a.out, e))?;
    println!("{}x{} image written to {}", img.width(), img.height(), a.out.display());
    Ok(())
}

pub fn info(a: InfoArgs) -> Result<()> {
    let bytes = std::fs::read(&a.path).map_err(|e| Error::io(&a.path, e))?;
    if bytes.starts_with(FMESH_MAGIC) {
        let m = FlatMesh::from_bytes(&bytes)?;
        println!("mesh: {} vertices ({} valid), {} triangles", m.n_vertices(), m.n_valid(), m.n_triangles());
    } else if bytes.starts_with(FGRID_MAGIC) {
        let g = ResampleGrid::from_bytes(&bytes)?;
        println!(
            "grid: {}x{} at {} mm, {} valid pixels, {} weights over {} vertices, hash {}",
            g.height(),
            g.width(),
            g.pixel_mm(),
            g.n_valid(),
            g.nnz(),
            g.n_vertices(),
            hex::encode(g.hash())
        );
    } else if bytes.starts_with(FMRUN_MAGIC) {
        let r = run_from_bytes(&bytes)?;
        println!(
            "run: {} vertices x {} times, TR {} s, subject {}, run {}",
            r.n_vertices, r.n_times, r.tr, r.subject_id, r.run_id
        );
    } else if bytes.starts_with(FMSHRD_MAGIC) {
        let s = Shard::from_bytes(&bytes)?;
        println!(
            "shard: {} frames of {}x{}, TR {} s, subject {}, run {}, grid {}",
            s.n_frames,
            s.height,
            s.width,
            s.tr,
            s.subject_id,
            s.run_id,
            hex::encode(s.grid_hash)
        );
    } else if bytes.starts_with(FMCKPT_MAGIC) {
        let ck = Checkpoint::from_bytes(&bytes)?;
        use flatmae::nn::ParamVisit;
        println!(
            "checkpoint: step {}, {} parameters ({} encoder)",
            ck.header.step,
            ck.params.num_params(),
            ck.params.encoder_param_count()
        );
        println!("{}", serde_json::to_string_pretty(&ck.header)?);
    } else {
        return Err(Error::Format(format!("{}: unrecognized file type", a.path.display())));
    }
    Ok(())
}
