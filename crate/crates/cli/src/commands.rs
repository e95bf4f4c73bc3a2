use std::fs::File;
use std::io::{LineWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use kpx::bench::{parse_sweep, sweep, SweepSpec};
use kpx::io::{read_ply, write_ply};
use kpx::kernelgeo::{nearest_kernel_regions, optimize_disposition, verify_disposition, KernelDisposition};
use kpx::network::{AllChannels, ArchitectureConfig, Groups, Head, Model, Operator, ParamAudit};
use kpx::sampling::grid_subsample;
use kpx::train::{evaluate_voting, synth_generate, train_loop, Evaluation, SyntheticSpec, Task};

use crate::config::{resolve_arch, DataSection, RunFile};
use crate::data::{read_dataset, read_eval_split, write_dataset};
use crate::{
    BenchArgs, Command, EvalArgs, KernelCommand, OperatorArg, ParamsArgs, SubsampleArgs, SynthArgs, SynthFlags,
    TaskArg, TrainArgs,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Kernel(k) => kernel(k),
        Command::Subsample(a) => subsample(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Params(a) => params(a),
    }
}

/// Writes to standard output; a closed pipe (`kpx ... | head`) is not an
/// error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => emit(text),
    }
}

fn read_kernel(path: &Path) -> Result<KernelDisposition> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    KernelDisposition::from_text(&text).with_context(|| format!("parsing {}", path.display()))
}

fn kernel(cmd: KernelCommand) -> Result<()> {
    match cmd {
        KernelCommand::Init {
            shells,
            radius,
            seed,
            out,
        } => {
            let d = optimize_disposition(&shells, radius, seed)?;
            let r = verify_disposition(&d);
            log::info!(
                "{} points, min spacing {:.6}, shell error {:.2e}",
                d.num_points(),
                r.min_pairwise_distance,
                r.shell_error_max
            );
            write_or_print(out.as_deref(), &d.to_text())
        }
        KernelCommand::Check { file, tol } => {
            let d = read_kernel(&file)?;
            let r = verify_disposition(&d);
            let passes = r.passes(tol);
            emit(&format!(
                "points,{}\nshells,{:?}\nshell_error_max,{:e}\nshell_radii_error,{:e}\ncenter_offset,{:e}\n\
                 min_pairwise_distance,{}\nstatus,{}\n",
                d.num_points(),
                d.shell_counts,
                r.shell_error_max,
                r.shell_radii_error,
                r.center_offset,
                r.min_pairwise_distance,
                if passes { "pass" } else { "fail" }
            ))?;
            if !passes {
                bail!("{} fails the disposition invariants at tolerance {tol:e}", file.display());
            }
            Ok(())
        }
        KernelCommand::Regions { file, resolution, out } => {
            let d = read_kernel(&file)?;
            let map = nearest_kernel_regions(&d, resolution)?;
            if let Some(p) = out {
                std::fs::write(&p, map.to_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
            emit(&counts_csv("kernel_point,probes", &map.histogram(d.num_points())))
        }
    }
}

fn subsample(a: SubsampleArgs) -> Result<()> {
    let cloud = read_ply(&a.input)?;
    let (sub, _) = grid_subsample(&cloud, a.cell)?;
    write_ply(&sub, &a.out)?;
    log::info!("{} -> {} points", cloud.len(), sub.len());
    Ok(())
}

fn task_of(head: Head) -> Task {
    match head {
        Head::Segmentation { .. } => Task::Segmentation,
        Head::Classification { .. } => Task::Classification,
    }
}

/// Generator defaults for `task`, then the run file's `[data]`, then flags.
fn synth_spec(task: Task, classes: usize, seed: u64, file: &DataSection, flags: &SynthFlags) -> SyntheticSpec {
    let mut spec = match task {
        Task::Segmentation => SyntheticSpec::segmentation(0.0, seed),
        Task::Classification => SyntheticSpec::classification(0.0, seed),
    };
    spec.classes = classes;
    if let Some(v) = flags.noise.or(file.noise) {
        spec.noise = v;
    }
    if let Some(v) = flags.points.or(file.points_per_cloud) {
        spec.points_per_cloud = v;
    }
    if let Some(v) = flags.train_clouds.or(file.train_clouds) {
        spec.train_clouds = v;
    }
    if let Some(v) = flags.val_clouds.or(file.val_clouds) {
        spec.val_clouds = v;
    }
    spec
}

fn counts_csv(header: &str, counts: &[usize]) -> String {
    let mut text = format!("{header}\n");
    for (i, n) in counts.iter().enumerate() {
        text.push_str(&format!("{i},{n}\n"));
    }
    text
}

fn synth(a: SynthArgs) -> Result<()> {
    let task = match a.task {
        TaskArg::Seg => Task::Segmentation,
        TaskArg::Cls => Task::Classification,
    };
    let spec = synth_spec(task, 4, a.seed, &DataSection::default(), &a.synth);
    let data = synth_generate(&spec)?;
    write_dataset(&data, &a.out_dir)?;
    emit(&counts_csv("class,count", &data.histogram()))
}

fn print_evaluation(e: &Evaluation, out: Option<&Path>) -> Result<()> {
    if let Some(p) = out {
        let mut text = String::from("class,iou\n");
        for (c, iou) in e.confusion.ious().iter().enumerate() {
            let v = iou.map_or(String::new(), |v| format!("{v:.6}"));
            text.push_str(&format!("{c},{v}\n"));
        }
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(&format!(
        "accuracy,mean_accuracy,mean_iou\n{:.6},{:.6},{:.6}\n",
        e.metrics.accuracy, e.metrics.mean_accuracy, e.metrics.mean_iou
    ))
}

fn train(a: TrainArgs) -> Result<()> {
    let run = match &a.config {
        Some(p) => RunFile::load(p)?,
        None => RunFile::default(),
    };
    let mut arch = run.architecture(a.preset.as_deref())?;
    if let Some(op) = a.operator {
        arch.operator = match op {
            OperatorArg::Kpconvx => Operator::Kpconvx,
            OperatorArg::Kpconvd => Operator::Kpconvd,
        };
    }
    let task = task_of(arch.head);
    let classes = arch.head.classes();

    let mut tc = run.train.clone();
    let oc = &mut tc.optimizer;
    oc.epochs = a.epochs.unwrap_or(oc.epochs);
    oc.steps_per_epoch = a.steps.unwrap_or(oc.steps_per_epoch);
    oc.accumulation = a.accumulation.unwrap_or(oc.accumulation);
    oc.lr = a.lr.unwrap_or(oc.lr);
    tc.batch_clouds = a.batch_clouds.unwrap_or(tc.batch_clouds);
    if task == Task::Classification {
        tc.augment.unit_sphere = true;
    }

    let data = match a.data.as_ref().or(run.data.dir.as_ref()) {
        Some(dir) => read_dataset(dir, task, classes)?,
        None => synth_generate(&synth_spec(task, classes, a.seed, &run.data, &a.synth))?,
    };
    let mut model = Model::<f32>::new(arch, a.seed)?;
    log::info!(
        "{} parameters, {} training and {} validation clouds",
        model.num_parameters(),
        data.train.len(),
        data.val.len()
    );

    let mut log_file = match &a.metrics {
        Some(p) => Some(LineWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    train_loop(
        &mut model,
        &data,
        &tc,
        a.seed,
        log_file.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let Some(p) = &a.checkpoint {
        model.save(p).with_context(|| format!("writing {}", p.display()))?;
    }
    let votes = a.votes.or(run.data.votes).unwrap_or(1);
    let e = evaluate_voting(&mut model, &data.val, task, classes, votes)?;
    print_evaluation(&e, None)
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut model = Model::<f32>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let task = task_of(model.config.head);
    let classes = model.config.head.classes();
    let samples = match &a.data {
        Some(dir) => read_eval_split(dir, task)?,
        None => {
            let mut spec = synth_spec(task, classes, a.seed, &DataSection::default(), &a.synth);
            spec.train_clouds = 0;
            synth_generate(&spec)?.val
        }
    };
    let e = evaluate_voting(&mut model, &samples, task, classes, a.votes)?;
    print_evaluation(&e, a.out.as_deref())
}

fn bench(a: BenchArgs) -> Result<()> {
    let (param, values) = parse_sweep(&a.sweep)?;
    let mut spec = SweepSpec::new(a.op, param, values);
    spec.n = a.n;
    spec.h = a.h;
    spec.c = a.c;
    spec.k = a.k;
    spec.group_size = a.groups;
    spec.c_out = a.cout;
    spec.trials = a.trials;
    spec.warmup = a.warmup;
    spec.seed = a.seed;
    spec.threads = kpx::parallel::threads();
    let report = sweep(&spec)?;
    if let Some(r) = report.median_ratio() {
        log::info!("{}: median time ratio last/first {r:.3}", a.op);
    }
    write_or_print(a.out.as_deref(), &report.to_csv())
}

fn params(a: ParamsArgs) -> Result<()> {
    let mut cfg: ArchitectureConfig = resolve_arch(&a.arch)?;
    if let Some(n) = a.classes {
        cfg.head = match cfg.head {
            Head::Segmentation { .. } => Head::Segmentation { classes: n },
            Head::Classification { .. } => Head::Classification { classes: n },
        };
    }
    if let Some(g) = &a.groups {
        cfg.groups = if g.eq_ignore_ascii_case("c") {
            Groups::All(AllChannels::C)
        } else {
            Groups::Size(g.parse().with_context(|| format!("--groups expects a number or C, got `{g}`"))?)
        };
    }
    cfg.validate()?;
    let audit = if a.analytic {
        ParamAudit::analytic(&cfg)
    } else {
        Model::<f32>::new(cfg, 0)?.audit()
    };
    emit(&format!("{audit}\n"))
}
