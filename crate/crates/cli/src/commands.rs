use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::Context as _;
use clap::{Args, ValueEnum};
use face3d::candidates::{
    apply_support, generate_candidates, nms, read_detections_jsonl, score_candidates, write_detections_jsonl,
    DetectionConfig, FaceCandidate, KeypointDetection,
};
use face3d::geometry::{iou, Box2, Rpy};
use face3d::keypoints::KeypointType;
use face3d::pose_regression::PoseRegressor;
use face3d::psm::{train_psm as fit_psm, ModelKind, PsmTrainConfig, PsmWeights, TrainExample};
use face3d::rigid_fit::ProjectionFitOptions;
use face3d::shape::{canonical_face_shape, fit_face_pose, learn_shape as fit_shape, AnnotationSet, ShapeLearnOptions, ShapeModel};
use face3d::synth::{
    auc, derive_seed, evaluate_boxes, gen_scenes, psm_examples, scene_candidates, train_regressors, EvalCounts, EvalReport,
    Proposals, Scene, SceneSpec, SyntheticFeatures, EVAL_CSV_HEADER,
};
use face3d::SCHEMA_VERSION;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::files::{check_inputs, read_json, DetectFile, Output, RegressorFile, SceneDetections, SceneFile};

pub struct Context {
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

impl Context {
    fn load_config(&self) -> anyhow::Result<RunConfig> {
        if let Some(p) = &self.config {
            check_inputs(&[p])?;
        }
        RunConfig::load(self.config.as_deref())
    }
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum KindArg {
    Linear,
    Nonlinear,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Linear => ModelKind::Linear,
            KindArg::Nonlinear => ModelKind::Nonlinear,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProposalsArg {
    All,
    CenterOnly,
}

impl From<ProposalsArg> for Proposals {
    fn from(p: ProposalsArg) -> Self {
        match p {
            ProposalsArg::All => Proposals::All,
            ProposalsArg::CenterOnly => Proposals::CenterOnly,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitPoseArgs {
    /// Shape model JSON.
    #[arg(long)]
    pub shape: PathBuf,
    /// CSV with columns face_id,keypoint_name,x,y,visible.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Serialize)]
struct PoseRecord {
    face_id: String,
    u: [f64; 2],
    s: f64,
    rpy: Option<Rpy>,
    rotation: face3d::geometry::Rotation3,
    residual: f64,
}

pub fn fit_pose(ctx: &Context, args: FitPoseArgs) -> anyhow::Result<()> {
    check_inputs(&[&args.shape, &args.annotations])?;
    let mut config = ctx.load_config()?;
    if let Some(m) = args.max_iter {
        config.shape.max_iter = m;
    }
    config.validate()?;
    let shape = ShapeModel::load(&args.shape).with_context(|| format!("loading {}", args.shape.display()))?;
    let ann = AnnotationSet::load_csv(&args.annotations, Some(&shape.keypoint_names))?;
    ann.validate()?;
    let options = ProjectionFitOptions { max_iter: config.shape.max_iter, ..Default::default() };
    let poses = ann
        .faces
        .iter()
        .map(|face| {
            let (pose, residual) =
                fit_face_pose(&shape.points, face, options).with_context(|| format!("face {}", face.face_id))?;
            Ok(PoseRecord {
                face_id: face.face_id.clone(),
                u: [pose.u.x, pose.u.y],
                s: pose.s,
                rpy: pose.rpy().ok(),
                rotation: pose.rotation,
                residual,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut out = Output::create(&ctx.out)?;
    out.json("poses.json", &json!({ "schema_version": SCHEMA_VERSION, "poses": poses }))?;
    out.finish("fit-pose", ctx.seed, &args, &config)
}

#[derive(Debug, Args, Serialize)]
pub struct LearnShapeArgs {
    /// CSV with columns face_id,keypoint_name,x,y,visible.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub n_outer: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
}

pub fn learn_shape(ctx: &Context, args: LearnShapeArgs) -> anyhow::Result<()> {
    check_inputs(&[&args.annotations])?;
    let mut config = ctx.load_config()?;
    if let Some(n) = args.n_outer {
        config.shape.n_outer = n;
    }
    if let Some(r) = args.restarts {
        config.shape.restarts = r;
    }
    config.validate()?;
    let ann = AnnotationSet::load_csv(&args.annotations, None)?;
    ann.validate()?;
    let options = ShapeLearnOptions {
        n_outer: config.shape.n_outer,
        restarts: config.shape.restarts,
        seed: derive_seed(ctx.seed, "shape"),
        projection: ProjectionFitOptions { max_iter: config.shape.max_iter, ..Default::default() },
        ..Default::default()
    };
    let result = fit_shape(&ann, options)?;
    let mut out = Output::create(&ctx.out)?;
    out.text("shape.json", &(result.shape.to_json()? + "\n"))?;
    out.json(
        "learn.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "final_energy": result.final_energy(),
            "outer_iterations": result.outer_iterations,
            "restart": result.restart,
            "restart_energies": result.restart_energies,
            "underdetermined": result.underdetermined,
            "energy_trace": result.energy_trace,
        }),
    )?;
    out.finish("learn-shape", ctx.seed, &args, &config)
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Index of the first scene; disjoint index ranges give disjoint scenes.
    #[arg(long, default_value_t = 0)]
    pub first: usize,
    /// Shape model JSON; the built-in face shape when absent.
    #[arg(long)]
    pub shape: Option<PathBuf>,
}

fn load_shape(path: Option<&PathBuf>) -> anyhow::Result<ShapeModel> {
    match path {
        Some(p) => ShapeModel::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(canonical_face_shape()),
    }
}

fn scene_spec(ctx: &Context, config: &RunConfig) -> SceneSpec {
    SceneSpec { seed: derive_seed(ctx.seed, "synth"), ..config.scene.clone() }
}

pub fn synth(ctx: &Context, args: SynthArgs) -> anyhow::Result<()> {
    if let Some(p) = &args.shape {
        check_inputs(&[p])?;
    }
    let config = ctx.load_config()?;
    config.validate()?;
    let shape = load_shape(args.shape.as_ref())?;
    let spec = scene_spec(ctx, &config);
    let scenes = gen_scenes(&spec, &shape, args.first, args.count)?;

    let mut out = Output::create(&ctx.out)?;
    let mut jsonl = Vec::new();
    for s in &scenes {
        write_detections_jsonl(&mut jsonl, &s.detections)?;
    }
    out.text("detections.jsonl", std::str::from_utf8(&jsonl)?)?;
    let features: Vec<_> = scenes.iter().map(|s| json!({ "scene": s.index, "rows": s.features })).collect();
    out.json("features.json", &json!({ "schema_version": SCHEMA_VERSION, "scenes": features }))?;
    out.json("scenes.json", &SceneFile::new(spec, &shape, scenes)?)?;
    out.finish("synth", ctx.seed, &args, &config)
}

#[derive(Debug, Args, Serialize)]
pub struct TrainPoseregArgs {
    /// Scenes written by `synth`.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Features kept per regressor.
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn train_posereg(ctx: &Context, args: TrainPoseregArgs) -> anyhow::Result<()> {
    check_inputs(&[&args.scenes])?;
    let mut config = ctx.load_config()?;
    if args.features.is_some() {
        config.posereg.features = args.features;
    }
    if let Some(e) = args.epochs {
        config.posereg.epochs = e;
    }
    config.validate()?;
    let (file, _) = SceneFile::load(&args.scenes)?;
    let regressors = train_regressors(&file.scenes, &config.posereg)?;
    let r2: BTreeMap<KeypointType, [f64; 6]> = regressors.iter().map(|(k, r)| (*k, r.r2)).collect();

    let mut out = Output::create(&ctx.out)?;
    out.json("regressors.json", &RegressorFile { schema_version: SCHEMA_VERSION, regressors })?;
    out.json("posereg_report.json", &json!({ "schema_version": SCHEMA_VERSION, "r2": r2 }))?;
    out.finish("train-posereg", ctx.seed, &args, &config)
}

#[derive(Debug, Args, Serialize)]
pub struct TrainPsmArgs {
    /// Scenes written by `synth`.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Regressors written by `train-posereg`.
    #[arg(long)]
    pub regressors: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long)]
    pub theta_bins: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Support threshold applied to the training candidates.
    #[arg(long, default_value_t = 0)]
    pub train_n_supp: usize,
}

fn training_examples(
    scenes: &[Scene],
    regs: &BTreeMap<KeypointType, PoseRegressor>,
    shape: &ShapeModel,
    spec: &SceneSpec,
    config: &RunConfig,
    n_supp: usize,
) -> anyhow::Result<Vec<TrainExample>> {
    let det_config = DetectionConfig { n_supp, ..config.detection.clone() };
    let cands = scenes
        .par_iter()
        .map(|s| scene_candidates(s, regs, shape, spec, &det_config, config.proposals))
        .collect::<face3d::Result<Vec<_>>>()?;
    Ok(psm_examples(scenes, &cands, shape, spec, &det_config)?)
}

pub fn train_psm(ctx: &Context, args: TrainPsmArgs) -> anyhow::Result<()> {
    check_inputs(&[&args.scenes, &args.regressors])?;
    let mut config = ctx.load_config()?;
    if let Some(k) = args.kind {
        config.psm.kind = k.into();
    }
    if args.theta_bins.is_some() {
        config.psm.theta_bins = args.theta_bins;
    }
    if let Some(e) = args.epochs {
        config.psm.epochs = e;
    }
    config.validate()?;
    let (file, shape) = SceneFile::load(&args.scenes)?;
    let regs = RegressorFile::load(&args.regressors)?;
    let examples = training_examples(&file.scenes, &regs, &shape, &file.spec, &config, args.train_n_supp)?;
    let weights = fit_psm(&examples, &config.psm, derive_seed(ctx.seed, "psm"))?;
    let positives = examples.iter().filter(|e| e.max_overlap() > 0.5).count();

    let mut out = Output::create(&ctx.out)?;
    out.text("psm.json", &(weights.to_json()? + "\n"))?;
    out.json(
        "psm_report.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "examples": examples.len(),
            "positives": positives,
            "active_features": weights.active.len(),
            "cost_trace": weights.cost_trace,
        }),
    )?;
    out.finish("train-psm", ctx.seed, &args, &config)
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    /// Scenes written by `synth`.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Regressors written by `train-posereg`.
    #[arg(long)]
    pub regressors: PathBuf,
    /// Scorer written by `train-psm`.
    #[arg(long)]
    pub model: PathBuf,
    /// Keypoint detections replacing those stored with the scenes.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub n_supp: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_enum)]
    pub proposals: Option<ProposalsArg>,
}

struct SceneResult {
    generated: usize,
    candidates: Vec<FaceCandidate>,
    faces: Vec<FaceCandidate>,
}

fn detect_scene(
    scene: &Scene,
    dets: &[KeypointDetection],
    regs: &BTreeMap<KeypointType, PoseRegressor>,
    model: &PsmWeights,
    shape: &ShapeModel,
    spec: &SceneSpec,
    config: &RunConfig,
) -> face3d::Result<SceneResult> {
    let source = SyntheticFeatures::new(scene, shape, spec)?;
    let proposing: Vec<KeypointDetection> = dets.iter().filter(|d| config.proposals.admits(d.kind)).cloned().collect();
    let generated = generate_candidates(&proposing, regs, &source, shape)?;
    let count = generated.len();
    let mut candidates = apply_support(generated, dets, shape, &config.detection);
    score_candidates(&mut candidates, dets, model, &source, shape, &config.detection)?;
    let faces = nms(&candidates, config.detection.tau, config.detection.overlap);
    Ok(SceneResult { generated: count, candidates, faces })
}

pub fn detect(ctx: &Context, args: DetectArgs) -> anyhow::Result<()> {
    let mut inputs = vec![args.scenes.as_path(), args.regressors.as_path(), args.model.as_path()];
    if let Some(d) = &args.detections {
        inputs.push(d);
    }
    check_inputs(&inputs)?;
    let mut config = ctx.load_config()?;
    if let Some(n) = args.n_supp {
        config.detection.n_supp = n;
    }
    if let Some(t) = args.tau {
        config.detection.tau = t;
    }
    if let Some(p) = args.proposals {
        config.proposals = p.into();
    }
    config.validate()?;
    let (file, shape) = SceneFile::load(&args.scenes)?;
    let regs = RegressorFile::load(&args.regressors)?;
    let model_text = std::fs::read_to_string(&args.model)?;
    let model = PsmWeights::from_json(&model_text).with_context(|| format!("loading {}", args.model.display()))?;

    let mut by_scene: BTreeMap<usize, Vec<KeypointDetection>> = BTreeMap::new();
    if let Some(path) = &args.detections {
        let reader = BufReader::new(std::fs::File::open(path)?);
        for d in read_detections_jsonl(reader, &path.display().to_string())? {
            by_scene.entry(d.scene).or_default().push(d);
        }
    } else {
        for s in &file.scenes {
            by_scene.insert(s.index, s.detections.clone());
        }
    }

    let scenes = file
        .scenes
        .par_iter()
        .map(|scene| {
            let dets = by_scene.get(&scene.index).map(Vec::as_slice).unwrap_or(&[]);
            let r = detect_scene(scene, dets, &regs, &model, &shape, &file.spec, &config)?;
            Ok(SceneDetections {
                scene: scene.index,
                generated: r.generated,
                candidates: r.candidates.iter().map(FaceCandidate::to_record).collect(),
                faces: r.faces.iter().map(FaceCandidate::to_record).collect(),
            })
        })
        .collect::<face3d::Result<Vec<_>>>()?;

    let mut out = Output::create(&ctx.out)?;
    out.json("detections.json", &DetectFile { schema_version: SCHEMA_VERSION, scenes })?;
    out.finish("detect", ctx.seed, &args, &config)
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Scenes written by `synth`.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Detections written by `detect`.
    #[arg(long)]
    pub detections: PathBuf,
}

pub fn eval(ctx: &Context, args: EvalArgs) -> anyhow::Result<()> {
    check_inputs(&[&args.scenes, &args.detections])?;
    let config = ctx.load_config()?;
    config.validate()?;
    let (file, _) = SceneFile::load(&args.scenes)?;
    let dets: DetectFile = read_json(&args.detections)?;
    let truth: BTreeMap<usize, Vec<Box2>> = file.scenes.iter().map(|s| (s.index, s.face_boxes())).collect();

    let mut candidates = EvalCounts::default();
    let mut faces = EvalCounts::default();
    for sd in &dets.scenes {
        let t = truth.get(&sd.scene).ok_or_else(|| {
            face3d::Error::InvalidInput(format!("scene {} is not in {}", sd.scene, args.scenes.display()))
        })?;
        let boxes = |records: &[face3d::candidates::CandidateRecord]| records.iter().map(|r| r.bbox).collect::<Vec<_>>();
        candidates += evaluate_boxes(&boxes(&sd.candidates), t);
        faces += evaluate_boxes(&boxes(&sd.faces), t);
    }
    let reports = [("candidates", candidates.report()), ("faces", faces.report())];

    let mut out = Output::create(&ctx.out)?;
    out.json(
        "eval.json",
        &json!({ "schema_version": SCHEMA_VERSION, "candidates": reports[0].1, "faces": reports[1].1 }),
    )?;
    let mut csv = format!("stage,{EVAL_CSV_HEADER}\n");
    for (stage, r) in &reports {
        csv += &format!("{stage},{}\n", r.csv_row());
    }
    out.text("eval.csv", &csv)?;
    out.finish("eval", ctx.seed, &args, &config)
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long, default_value_t = 300)]
    pub train_scenes: usize,
    #[arg(long, default_value_t = 200)]
    pub test_scenes: usize,
    /// Shape model JSON; the built-in face shape when absent.
    #[arg(long)]
    pub shape: Option<PathBuf>,
}

/// Support thresholds swept by `ablate`.
pub const ABLATION_N_SUPP: [usize; 6] = [0, 1, 2, 3, 4, 5];

#[derive(Serialize)]
struct AblationRow {
    n_supp: usize,
    classifier: &'static str,
    candidates: EvalReport,
    faces: EvalReport,
    auc: f64,
}

pub fn ablate(ctx: &Context, args: AblateArgs) -> anyhow::Result<()> {
    if let Some(p) = &args.shape {
        check_inputs(&[p])?;
    }
    let config = ctx.load_config()?;
    config.validate()?;
    if args.train_scenes == 0 || args.test_scenes == 0 {
        return Err(face3d::Error::InvalidConfig("scene counts must be positive".into()).into());
    }
    let shape = load_shape(args.shape.as_ref())?;
    let spec = scene_spec(ctx, &config);
    let train = gen_scenes(&spec, &shape, 0, args.train_scenes)?;
    let test = gen_scenes(&spec, &shape, args.train_scenes, args.test_scenes)?;
    let regs = train_regressors(&train, &config.posereg)?;
    let examples = training_examples(&train, &regs, &shape, &spec, &config, 0)?;
    let insensitive = PsmTrainConfig { kind: ModelKind::Linear, theta_bins: Some(1), ..config.psm.clone() };
    let classifiers = [
        ("sensitive", fit_psm(&examples, &config.psm, derive_seed(ctx.seed, "psm"))?),
        ("insensitive", fit_psm(&examples, &insensitive, derive_seed(ctx.seed, "psm"))?),
    ];

    let generated = test
        .par_iter()
        .map(|s| {
            let source = SyntheticFeatures::new(s, &shape, &spec)?;
            let proposing: Vec<KeypointDetection> =
                s.detections.iter().filter(|d| config.proposals.admits(d.kind)).cloned().collect();
            generate_candidates(&proposing, &regs, &source, &shape)
        })
        .collect::<face3d::Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for n_supp in ABLATION_N_SUPP {
        let det_config = DetectionConfig { n_supp, ..config.detection.clone() };
        for (name, model) in &classifiers {
            let per_scene = test
                .par_iter()
                .zip(&generated)
                .map(|(s, g)| {
                    let source = SyntheticFeatures::new(s, &shape, &spec)?;
                    let mut cands = apply_support(g.clone(), &s.detections, &shape, &det_config);
                    score_candidates(&mut cands, &s.detections, model, &source, &shape, &det_config)?;
                    let faces = nms(&cands, det_config.tau, det_config.overlap);
                    Ok((cands, faces))
                })
                .collect::<face3d::Result<Vec<_>>>()?;
            let mut cand_counts = EvalCounts::default();
            let mut face_counts = EvalCounts::default();
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (s, (cands, faces)) in test.iter().zip(&per_scene) {
                let truth = s.face_boxes();
                let boxes = |c: &[FaceCandidate]| c.iter().map(FaceCandidate::bbox).collect::<Vec<_>>();
                cand_counts += evaluate_boxes(&boxes(cands), &truth);
                face_counts += evaluate_boxes(&boxes(faces), &truth);
                for c in cands {
                    let b = c.bbox();
                    let best = truth.iter().map(|t| iou(&b, t)).fold(0.0, f64::max);
                    if best > 0.5 {
                        pos.push(c.score);
                    } else {
                        neg.push(c.score);
                    }
                }
            }
            rows.push(AblationRow {
                n_supp,
                classifier: name,
                candidates: cand_counts.report(),
                faces: face_counts.report(),
                auc: auc(&pos, &neg),
            });
        }
    }

    let mut csv = String::from(
        "n_supp,classifier,cand_fp_lt_0.3,cand_fp_lt_0.5,cand_det_gt_0.5,cand_det_gt_0.7,candidates,\
         face_fp_lt_0.3,face_fp_lt_0.5,face_det_gt_0.5,face_det_gt_0.7,detections,faces,auc\n",
    );
    for r in &rows {
        let (c, f) = (&r.candidates, &r.faces);
        csv += &format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{},{:.4},{:.4},{:.4},{:.4},{},{},{:.4}\n",
            r.n_supp,
            r.classifier,
            c.fp_lt_03,
            c.fp_lt_05,
            c.det_gt_05,
            c.det_gt_07,
            c.candidates,
            f.fp_lt_03,
            f.fp_lt_05,
            f.det_gt_05,
            f.det_gt_07,
            f.candidates,
            f.faces,
            r.auc
        );
    }
    let mut out = Output::create(&ctx.out)?;
    out.json("ablation.json", &json!({ "schema_version": SCHEMA_VERSION, "rows": rows }))?;
    out.text("ablation.csv", &csv)?;
    out.finish("ablate", ctx.seed, &args, &config)
}
