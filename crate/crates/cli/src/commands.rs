//! Subcommand bodies.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use distillbev::harness::{
    evaluate, read_metrics, teacher_view, train_student, write_layer_losses, write_metrics,
    StudentModel, TeacherNet, INPUT_CHANNELS,
};
use distillbev::loss::{layer_weight_maps, LayerId};
use distillbev::nn::Bind;
use distillbev::sim::{
    generate_dataset, load_dataset, read_scene, stream_rng, write_dataset, Dataset,
};
use distillbev::tensor::{read_checkpoint, write_checkpoint, Graph, Tensor};

use crate::config::ExperimentConfig;
use crate::output::{curves_svg, to_gray, write_npy, write_png, NpyData};
use crate::Failure;

fn runtime(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| runtime(path, e))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| runtime(path, e))?,
    ))
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    load_dataset(path).map_err(|e| runtime(path, e))
}

/// Leading `train_scenes` sequences for training, the next `eval_scenes` for evaluation.
fn split(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(Dataset, Dataset), Failure> {
    let (nt, ne) = (cfg.data.train_scenes, cfg.data.eval_scenes);
    if nt == 0 || ds.len() < nt + ne {
        return Err(Failure::Config(format!(
            "dataset holds {} scenes, config asks for {nt} training and {ne} evaluation scenes",
            ds.len()
        )));
    }
    let part = |r: std::ops::Range<usize>| Dataset {
        sequences: ds.sequences[r].to_vec(),
        ..ds.clone()
    };
    let train = part(0..nt);
    let eval = if ne == 0 {
        train.clone()
    } else {
        part(nt..nt + ne)
    };
    Ok((train, eval))
}

fn read_state(path: &Path) -> Result<HashMap<String, Tensor<f64>>, Failure> {
    let records = read_checkpoint::<f64, _>(open(path)?).map_err(|e| runtime(path, e))?;
    Ok(records.into_iter().collect())
}

fn write_state(path: &Path, state: &[(String, Tensor<f64>)]) -> Result<(), Failure> {
    let mut w = create(path)?;
    write_checkpoint(&mut w, state).map_err(|e| runtime(path, e))?;
    w.flush().map_err(|e| runtime(path, e))
}

fn load_teacher(
    cfg: &ExperimentConfig,
    path: &Path,
    classes: usize,
) -> Result<TeacherNet, Failure> {
    let mut net = TeacherNet::new(
        &mut stream_rng(cfg.seed, 0),
        INPUT_CHANNELS,
        cfg.train.channels,
        classes,
    );
    net.load_state(&read_state(path)?)
        .map_err(|e| runtime(path, e))?;
    Ok(net)
}

fn load_student(
    cfg: &ExperimentConfig,
    teacher: &TeacherNet,
    path: &Path,
    resolution: usize,
    classes: usize,
) -> Result<StudentModel, Failure> {
    let mut m = StudentModel::new(teacher, &cfg.train_config()?, resolution, classes)?;
    m.load_state(&read_state(path)?)
        .map_err(|e| runtime(path, e))?;
    Ok(m)
}

pub fn gen(
    cfg: &ExperimentConfig,
    out: Option<PathBuf>,
    count: Option<usize>,
) -> Result<(), Failure> {
    let out = out.unwrap_or_else(|| cfg.data_dir());
    let n = count.unwrap_or(cfg.data.train_scenes + cfg.data.eval_scenes);
    let ds = generate_dataset(&cfg.scene, cfg.seed, n)?;
    let m = write_dataset(&ds, &out).map_err(|e| runtime(&out, e))?;
    println!(
        "wrote {} files ({} sequences × {} frames) to {}",
        m.files.len(),
        m.sequences,
        m.frames,
        out.display()
    );
    Ok(())
}

pub fn train_teacher(
    cfg: &ExperimentConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let ds = load_data(&data.unwrap_or_else(|| cfg.data_dir()))?;
    let (train, _) = split(cfg, &ds)?;
    let run = distillbev::harness::train_teacher(&train, &cfg.train_config()?)?;
    let out = out.unwrap_or_else(|| cfg.teacher_path());
    write_state(&out, &run.net.state())?;
    println!("initial_mse = {}", run.initial_mse);
    println!("final_mse = {}", run.final_mse);
    println!("checkpoint = {:?}", out.display().to_string());
    Ok(())
}

pub fn distill(
    cfg: &ExperimentConfig,
    data: Option<PathBuf>,
    teacher: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let tc = cfg.train_config()?;
    let ds = load_data(&data.unwrap_or_else(|| cfg.data_dir()))?;
    let (train, eval) = split(cfg, &ds)?;
    let teacher = load_teacher(
        cfg,
        &teacher.unwrap_or_else(|| cfg.teacher_path()),
        ds.config.classes(),
    )?;
    let run = train_student(&train, Some(&eval), &teacher, &tc)?;
    let dir = out.unwrap_or_else(|| cfg.run_dir(tc.distill));
    write_state(&dir.join("student.dbw"), &run.model.state())?;
    let p = dir.join("metrics.csv");
    write_metrics(create(&p)?, &run.history).map_err(|e| runtime(&p, e))?;
    let p = dir.join("layer_losses.csv");
    write_layer_losses(create(&p)?, &run.layer_losses).map_err(|e| runtime(&p, e))?;
    if let Some(last) = run.history.last() {
        println!("[final]");
        println!("epoch = {}", last.epoch);
        println!("feature_mse_to_teacher = {}", last.feature_mse_to_teacher);
        println!("synthetic_ap = {}", last.synthetic_ap);
    }
    println!("run_dir = {:?}", dir.display().to_string());
    Ok(())
}

pub fn eval(
    cfg: &ExperimentConfig,
    data: Option<PathBuf>,
    teacher: Option<PathBuf>,
    student: Option<PathBuf>,
) -> Result<(), Failure> {
    let ds = load_data(&data.unwrap_or_else(|| cfg.data_dir()))?;
    let (_, eval) = split(cfg, &ds)?;
    let classes = ds.config.classes();
    let teacher = load_teacher(cfg, &teacher.unwrap_or_else(|| cfg.teacher_path()), classes)?;
    let student_path =
        student.unwrap_or_else(|| cfg.run_dir(cfg.train.distill).join("student.dbw"));
    let model = load_student(cfg, &teacher, &student_path, ds.config.cells, classes)?;
    let m = evaluate(&model, &teacher, &eval)?;
    print!(
        "{}",
        toml::to_string(&m).map_err(|e| Failure::Runtime(e.to_string()))?
    );
    Ok(())
}

pub struct MaskArgs {
    pub sample: PathBuf,
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub layer: String,
    pub out: Option<PathBuf>,
    pub scale: usize,
}

/// Names of the six exported maps, in output order.
pub const MASK_FILES: [&str; 6] = [
    "labels",
    "mask_m",
    "scaling_s",
    "attention_teacher",
    "attention_student",
    "attention_combined",
];

pub fn masks(cfg: &ExperimentConfig, a: &MaskArgs) -> Result<(), Failure> {
    if a.scale == 0 {
        return Err(Failure::Config("--scale must be at least 1".into()));
    }
    let sample = read_scene(open(&a.sample)?).map_err(|e| runtime(&a.sample, e))?;
    let layer = LayerId::parse(&a.layer)?;
    let dc = cfg.distill_config()?;
    let Some(idx) = dc.layers.iter().position(|l| l.layer == layer) else {
        return Err(Failure::Config(format!(
            "layer {} is not distilled in this config",
            layer.name()
        )));
    };
    let classes = sample.classes();
    let teacher = load_teacher(
        cfg,
        &a.teacher.clone().unwrap_or_else(|| cfg.teacher_path()),
        classes,
    )?;
    let student_path = a
        .student
        .clone()
        .unwrap_or_else(|| cfg.run_dir(true).join("student.dbw"));
    let model = load_student(cfg, &teacher, &student_path, sample.grid.cells_y, classes)?;

    let view = teacher_view(&teacher, &sample)?;
    let mut g = Graph::new();
    let x = g.constant(sample.student_input.clone());
    let mut net = model.net.clone();
    let out = net.forward(&mut g, x, None, &mut Bind::infer())?;
    let mut adapter = model.adapters[idx].clone();
    let adapted = adapter.forward(&mut g, out.layer(layer), &mut Bind::infer())?;
    let maps = layer_weight_maps(
        &view.targets,
        view.layer(layer),
        g.value(adapted),
        dc.layers[idx].include_fp,
        &dc,
    )?;

    let (h, w) = (maps.partition.height, maps.partition.width);
    let dir = a.out.clone().unwrap_or_else(|| {
        let stem = a
            .sample
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        cfg.out_dir.join("masks").join(stem)
    });
    fs::create_dir_all(&dir).map_err(|e| runtime(&dir, e))?;
    let codes: Vec<u8> = maps.partition.label.iter().map(|l| l.code()).collect();
    let gray: Vec<u8> = codes.iter().map(|c| c * 85).collect();
    write_png(&dir.join("labels.png"), &gray, h, w, a.scale)?;
    write_npy(&dir.join("labels.npy"), NpyData::U8(&codes), &[h, w])?;
    let att = &maps.attention;
    let real: [(&str, &Tensor<f64>); 5] = [
        (MASK_FILES[1], &maps.m),
        (MASK_FILES[2], &maps.s),
        (MASK_FILES[3], &att.n_teacher),
        (MASK_FILES[4], &att.n_student),
        (MASK_FILES[5], &att.a),
    ];
    for (name, t) in real {
        write_png(
            &dir.join(format!("{name}.png")),
            &to_gray(t.data()),
            h,
            w,
            a.scale,
        )?;
        write_npy(
            &dir.join(format!("{name}.npy")),
            NpyData::F64(t.data()),
            &[h, w],
        )?;
    }
    println!(
        "wrote {} maps at {h}×{w} ({}) to {}",
        MASK_FILES.len(),
        layer.name(),
        dir.display()
    );
    Ok(())
}

pub fn plot(
    cfg: &ExperimentConfig,
    on: Option<PathBuf>,
    off: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let on = on.unwrap_or_else(|| cfg.run_dir(true).join("metrics.csv"));
    let off = off.unwrap_or_else(|| cfg.run_dir(false).join("metrics.csv"));
    let read = |p: &Path| read_metrics(open(p)?).map_err(|e| runtime(p, e));
    let (m_on, m_off) = (read(&on)?, read(&off)?);
    let svg = curves_svg(&[("distill on", &m_on), ("distill off", &m_off)]);
    let out = out.unwrap_or_else(|| cfg.out_dir.join("curves.svg"));
    let mut w = create(&out)?;
    w.write_all(svg.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| runtime(&out, e))?;
    println!("wrote {}", out.display());
    Ok(())
}
