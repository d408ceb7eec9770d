//! `fmd` command-line entry point.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fmd_core::harness::data::make_sample;
use fmd_core::harness::{self, ablate, report, DistillConfig, Shape};
use fmd_core::nets::Encoder;
use fmd_core::diffcore::ParamStore;
use fmd_core::pointops::PointCloud;
use fmd_core::{io, study, Error};

#[derive(Debug, Parser)]
#[command(name = "fmd", version, about = "Point-cloud feature distillation toolkit")]
struct Cli {
    /// flat `key = value` config file; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// base seed, replacing the config's `seed`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// validate the config and run shape checks without writing anything
    #[arg(long, global = true)]
    dry_run: bool,
    /// add wall-clock columns to CSV output (makes reruns differ)
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset
    Gen,
    /// Pretrain the teacher
    Train,
    /// Distill one student against the saved teacher
    Distill,
    /// Run the mode × seed distillation matrix
    Ablate,
    /// Benchmark the transport solvers on random instances
    OtBench,
    /// Histogram of distances between teacher and student FPS picks
    InconsistencyHist {
        /// read clouds from these files (.csv or PCLD) instead of generating them
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::ConfigLine { .. } => 2,
            _ => 3,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CmdResult {
    let cfg = match &cli.config {
        Some(p) => DistillConfig::load(p, cli.seed).map_err(|e| match e {
            Error::Io(io) => Failure {
                code: 2,
                msg: format!("cannot read config {}: {io}", p.display()),
            },
            e => e.into(),
        })?,
        None => DistillConfig::parse("", cli.seed)?,
    };
    let ctx = Ctx { cli, cfg };
    match &cli.command {
        Command::Gen => ctx.gen(),
        Command::Train => ctx.train(),
        Command::Distill => ctx.distill(),
        Command::Ablate => ctx.ablate(),
        Command::OtBench => ctx.ot_bench(),
        Command::InconsistencyHist { input } => ctx.hist(input),
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: DistillConfig,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cli.out.join(name)
    }

    fn out_dir(&self) -> Result<(), Error> {
        fs::create_dir_all(&self.cli.out)?;
        Ok(())
    }

    fn write_with(&self, name: &str, f: impl FnOnce(&mut BufWriter<fs::File>) -> fmd_core::Result<()>) -> CmdResult {
        let mut w = BufWriter::new(fs::File::create(self.path(name)).map_err(Error::from)?);
        f(&mut w)?;
        Ok(())
    }

    fn write_report(&self, prefix: &str, rep: &harness::RunReport) -> CmdResult {
        self.write_with(&format!("{prefix}_epochs.csv"), |w| report::write_epochs_csv(w, rep))?;
        self.write_with(&format!("{prefix}_summary.csv"), |w| report::write_summary_csv(w, rep, self.cli.timing))?;
        self.write_with(&format!("{prefix}_confusion.csv"), |w| report::write_confusion_csv(w, rep))
    }

    fn teacher_path(&self) -> PathBuf {
        self.cfg
            .teacher_checkpoint
            .clone()
            .unwrap_or_else(|| self.path("teacher.pdkp"))
    }

    fn load_teacher(&self) -> Result<Encoder, Failure> {
        let path = self.teacher_path();
        let params = ParamStore::load(&path).map_err(|e| Failure {
            code: 3,
            msg: format!("cannot load teacher checkpoint {}: {e}", path.display()),
        })?;
        Encoder::with_params(self.cfg.teacher_encoder(), params).map_err(|e| Failure {
            code: 2,
            msg: format!("teacher checkpoint {} does not fit the encoder config: {e}", path.display()),
        })
    }

    /// Shape check on one generated sample with the given (or a fresh) teacher.
    fn dry_run_distill(&self) -> CmdResult {
        let teacher = if self.teacher_path().exists() {
            self.load_teacher()?
        } else {
            eprintln!("note: no teacher checkpoint, checking shapes with a fresh teacher");
            Encoder::new(self.cfg.teacher_encoder())?
        };
        let sample = make_sample(&self.cfg.dataset, Shape::Sphere, 0, 1)?;
        harness::check_shapes(&self.cfg, &teacher, &sample)?;
        println!("dry run ok");
        Ok(())
    }

    fn gen(&self) -> CmdResult {
        if self.cli.dry_run {
            make_sample(&self.cfg.dataset, Shape::Sphere, 0, 1)?;
            println!("dry run ok");
            return Ok(());
        }
        let data = harness::gen_dataset(&self.cfg.dataset)?;
        let dir = self.path("dataset");
        harness::data::write_dataset(&dir, &data)?;
        println!("wrote {} train and {} test clouds to {}", data.train.len(), data.test.len(), dir.display());
        Ok(())
    }

    fn train(&self) -> CmdResult {
        if self.cli.dry_run {
            let teacher = Encoder::new(self.cfg.teacher_encoder())?;
            let sample = make_sample(&self.cfg.dataset, Shape::Sphere, 0, 1)?;
            let mut g = fmd_core::diffcore::Graph::new();
            let t = teacher.forward(&mut g, &sample.cloud, sample.id, false)?;
            g.softmax_cross_entropy(t.logits, sample.label)?;
            println!("dry run ok");
            return Ok(());
        }
        let data = harness::gen_dataset(&self.cfg.dataset)?;
        let (teacher, rep) = harness::pretrain_teacher(&self.cfg, &data)?;
        self.out_dir()?;
        self.write_report("teacher", &rep)?;
        check_status(&rep)?;
        teacher.params.save(self.path("teacher.pdkp"))?;
        print_metrics("teacher", &rep);
        Ok(())
    }

    fn distill(&self) -> CmdResult {
        if self.cli.dry_run {
            return self.dry_run_distill();
        }
        let teacher = self.load_teacher()?;
        let data = harness::gen_dataset(&self.cfg.dataset)?;
        let out = harness::distill(&self.cfg, &teacher, &data)?;
        let mode = self.cfg.mode.name();
        self.out_dir()?;
        self.write_report(mode, &out.report)?;
        check_status(&out.report)?;
        out.student.params.save(self.path(&format!("student_{mode}.pdkp")))?;
        print_metrics(mode, &out.report);
        Ok(())
    }

    fn ablate(&self) -> CmdResult {
        if self.cli.dry_run {
            for &mode in &self.cfg.ablate_modes {
                let cfg = DistillConfig {
                    mode,
                    ..self.cfg.clone()
                };
                Ctx { cli: self.cli, cfg }.dry_run_distill()?;
            }
            return Ok(());
        }
        let teacher = self.load_teacher()?;
        let data = harness::gen_dataset(&self.cfg.dataset)?;
        let runs = ablate::ablate(&self.cfg, &teacher, &data);
        self.out_dir()?;
        self.write_with("ablation.csv", |w| ablate::write_ablation_csv(w, &runs, self.cli.timing))?;
        for (mode, oa) in ablate::mode_means(&runs) {
            println!("{mode}: mean OA {oa:.2}");
        }
        let failed = runs.iter().filter(|r| r.ok_report().is_none()).count();
        if failed > 0 {
            return Err(Failure {
                code: 3,
                msg: format!("{failed} of {} runs failed", runs.len()),
            });
        }
        Ok(())
    }

    fn ot_bench(&self) -> CmdResult {
        let b = &self.cfg.bench;
        if self.cli.dry_run {
            println!("dry run ok");
            return Ok(());
        }
        let rows = study::ot_bench(&b.sizes, &b.dims, b.repeats, &b.eps, b.seed)?;
        self.out_dir()?;
        self.write_with("ot_bench.csv", |w| study::write_bench_csv(w, &rows, self.cli.timing))?;
        println!("{} rows", rows.len());
        Ok(())
    }

    fn hist(&self, input: &[PathBuf]) -> CmdResult {
        let h = &self.cfg.hist;
        let clouds: Vec<PointCloud> = if input.is_empty() {
            let spec = harness::DatasetSpec {
                points_per_cloud: h.points,
                ..self.cfg.dataset.clone()
            };
            let n = if self.cli.dry_run { 1 } else { h.clouds };
            (0..n)
                .map(|i| make_sample(&spec, Shape::ALL[i % 4], i as u64, 3).map(|s| s.cloud))
                .collect::<fmd_core::Result<_>>()?
        } else {
            input.iter().map(load).collect::<Result<_, _>>()?
        };
        if self.cli.dry_run {
            println!("dry run ok");
            return Ok(());
        }
        let main = study::inconsistency_hist(&clouds, h.sample_m, h.bins, h.teacher_seed, h.student_seed, h.pairing)?;
        let control = study::inconsistency_hist(&clouds, h.sample_m, h.bins, h.teacher_seed, h.teacher_seed, h.pairing)?;
        self.out_dir()?;
        self.write_with("inconsistency_hist.csv", |w| study::write_hist_csv(w, &main, &control))?;
        self.write_with("inconsistency_summary.csv", |w| study::write_hist_summary_csv(w, &main, &control))?;
        println!(
            "{} pairs from {} clouds ({} skipped); fraction above 1: {:.4}",
            main.pairs, main.clouds_used, main.clouds_skipped, main.above_one
        );
        Ok(())
    }
}

fn load(p: &PathBuf) -> Result<PointCloud, Failure> {
    io::load_cloud(Path::new(p)).map_err(|e| Failure {
        code: 3,
        msg: format!("{}: {e}", p.display()),
    })
}

fn check_status(rep: &harness::RunReport) -> CmdResult {
    match &rep.status {
        harness::RunStatus::Ok => Ok(()),
        harness::RunStatus::Failed(m) => Err(Failure {
            code: 3,
            msg: format!("{} run failed: {m}", rep.name),
        }),
    }
}

fn print_metrics(name: &str, rep: &harness::RunReport) {
    if let Some(m) = &rep.metrics {
        println!("{name}: OA {:.2}  mAcc {:.2}", m.oa, m.macc);
    }
}
