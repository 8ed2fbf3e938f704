//! Subcommand implementations. Every run writes `run.txt` into its output
//! directory before doing any work.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use disco_mri::basis::BasisSpec;
use disco_mri::eval::{evaluate, EvalProtocol, Recon};
use disco_mri::gradsuite::gradient_suite;
use disco_mri::mask::{generate_mask, mask_stats, STANDARD_RATES};
use disco_mri::metrics::{data_range, evaluate_metrics};
use disco_mri::model::{train, EvalOptions, Geometry, KernelKind, ModelConfig, ModelError, ModelParams, TrainConfig};
use disco_mri::phantom::{generate_phantoms, PhantomDataset};
use disco_mri::superres::{extend_fov, superres_image, transfer_images, TransferReport};
use disco_mri::tensor_io::{write_tensor, Tensor};
use ndarray::Array2;

use crate::{
    CliError, Command, DataSource, EvalCmd, GradcheckCmd, Kernel, MaskCmd, Method, Mode, Output, PhantomCmd, ReconCmd,
    SuperresCmd, TrainCmd,
};

pub fn run(cmd: &Command, argv: &[String]) -> Result<(), CliError> {
    let output = match cmd {
        Command::Mask(c) => &c.output,
        Command::Phantom(c) => &c.output,
        Command::Recon(c) => &c.output,
        Command::Train(c) => &c.output,
        Command::Eval(c) => &c.output,
        Command::Superres(c) => &c.output,
        Command::Gradcheck(c) => &c.output,
    };
    std::fs::create_dir_all(&output.out)?;
    write_manifest(cmd, argv, output)?;
    match cmd {
        Command::Mask(c) => mask(c),
        Command::Phantom(c) => phantom(c),
        Command::Recon(c) => recon(c),
        Command::Train(c) => train_cmd(c),
        Command::Eval(c) => eval(c),
        Command::Superres(c) => superres(c),
        Command::Gradcheck(c) => gradcheck(c),
    }
}

fn write_manifest(cmd: &Command, argv: &[String], output: &Output) -> Result<(), CliError> {
    let mut s = String::new();
    writeln!(s, "version={}", disco_mri::VERSION).unwrap();
    writeln!(s, "seed={}", output.seed).unwrap();
    writeln!(s, "argv={}", argv.iter().skip(1).cloned().collect::<Vec<_>>().join(" ")).unwrap();
    writeln!(s, "flags={cmd:?}").unwrap();
    std::fs::write(output.out.join("run.txt"), s)?;
    Ok(())
}

fn save_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn save_image(dir: &Path, stem: &str, x: &Array2<f64>) -> Result<(), CliError> {
    write_tensor(dir.join(format!("{stem}.notf")), &Tensor::from_real_array(&x.clone().into_dyn()))?;
    crate::pgm::write(dir.join(format!("{stem}.pgm")), x)?;
    Ok(())
}

fn square(shape: (usize, usize)) -> Result<usize, CliError> {
    if shape.0 != shape.1 {
        return Err(CliError::Usage(format!("phantoms are square, got {}x{}", shape.0, shape.1)));
    }
    Ok(shape.0)
}

fn load_data(src: &DataSource, seed: u64) -> Result<PhantomDataset, CliError> {
    match &src.data {
        Some(dir) => Ok(PhantomDataset::load(dir)?),
        None => Ok(generate_phantoms(src.count, square(src.shape)?, src.coils, seed)?),
    }
}

fn load_model(dir: &Path) -> Result<(ModelConfig, ModelParams), CliError> {
    let cfg = ModelConfig::load_manifest(dir.join("model.cfg"))?;
    let params = ModelParams::load(dir.join("model.ckpt"))?;
    Ok((cfg, params))
}

fn need_model(model: &Option<PathBuf>) -> Result<(ModelConfig, ModelParams), CliError> {
    let dir = model
        .as_ref()
        .ok_or_else(|| CliError::Usage("the model method needs --model DIR".into()))?;
    load_model(dir)
}

fn mask(c: &MaskCmd) -> Result<(), CliError> {
    let s = &c.sampling;
    let m = generate_mask(s.pattern, s.accel, s.cf, c.shape, c.output.seed)?;
    let (fraction, centre) = mask_stats(&m);
    let report = format!(
        "{}fraction={fraction:.6} target={:.6} center_width={centre} samples={}\n",
        m.header(),
        1.0 / s.accel as f64,
        m.popcount()
    );
    let weights = m.weights().to_owned();
    write_tensor(c.output.out.join("mask.notf"), &Tensor::from_real_array(&weights.clone().into_dyn()))?;
    crate::pgm::write(c.output.out.join("mask.pgm"), &weights)?;
    save_text(&c.output.out, "mask.txt", &report)?;
    print!("{report}");
    Ok(())
}

fn phantom(c: &PhantomCmd) -> Result<(), CliError> {
    let ds = generate_phantoms(c.count, square(c.shape)?, c.coils, c.output.seed)?;
    let dir = c.output.out.join("data");
    ds.save(&dir)?;
    if let Some(s) = ds.slices.first() {
        crate::pgm::write(c.output.out.join("slice0000.pgm"), &s.image)?;
    }
    println!("wrote {} slices of {}x{} with {} coils to {}", ds.len(), ds.resolution, ds.resolution, ds.n_coils, dir.display());
    Ok(())
}

fn recon(c: &ReconCmd) -> Result<(), CliError> {
    let ds = load_data(&c.source, c.output.seed)?;
    let slice = ds
        .slices
        .get(c.index)
        .ok_or_else(|| CliError::Usage(format!("slice {} of {}", c.index, ds.len())))?;
    let s = &c.sampling;
    let protocol = EvalProtocol::new(s.pattern, s.accel, s.cf, c.output.seed);
    let model = match c.method {
        Method::Model => Some(need_model(&c.model)?),
        _ => None,
    };
    let r = method_recon(c.method, c.lambda, c.iters, model.as_ref(), c.bypass_no);
    let (m, k) = protocol.measure(slice, c.index)?;
    let x = r.run(slice, &m, &k)?;
    let met = evaluate_metrics(&x, &slice.image, data_range(&slice.image))?;
    let report = format!(
        "method={} pattern={} R={} cf={} slice={}\nnmse={:.6e} psnr_db={:.4} ssim={:.6}\n",
        r.name(),
        s.pattern,
        s.accel,
        s.cf,
        c.index,
        met.nmse,
        met.psnr_db,
        met.ssim
    );
    save_image(&c.output.out, "recon", &x)?;
    save_image(&c.output.out, "target", &slice.image)?;
    save_text(&c.output.out, "report.txt", &report)?;
    print!("{report}");
    Ok(())
}

fn method_recon<'a>(
    method: Method,
    lambda: f64,
    iters: usize,
    model: Option<&'a (ModelConfig, ModelParams)>,
    bypass_no: bool,
) -> Recon<'a> {
    match (method, model) {
        (Method::Model, Some((cfg, params))) => Recon::Model {
            cfg,
            params,
            opts: EvalOptions { bypass_no, ..EvalOptions::default() },
        },
        (Method::Fista, _) => Recon::Fista { lambda_rel: lambda, max_iters: iters },
        _ => Recon::ZeroFilled,
    }
}

fn train_cmd(c: &TrainCmd) -> Result<(), CliError> {
    let ds = load_data(&c.source, c.output.seed)?;
    let kernel = match c.kernel {
        Kernel::Disco => KernelKind::Disco(BasisSpec::piecewise_linear(c.radius)),
        Kernel::Cnn => KernelKind::Cnn(c.kernel_size),
    };
    let cfg = ModelConfig::desk(ds.resolution, kernel, c.cascades, c.hidden);
    let mut tc = TrainConfig::new(c.epochs, c.lr, c.output.seed);
    tc.pattern = c.sampling.pattern;
    tc.accel = c.sampling.accel;
    tc.center_fraction = c.sampling.cf;
    tc.noise_sigma = c.noise;
    tc.max_steps = c.max_steps;
    tc.checkpoint_dir = Some(c.output.out.clone());
    tc.verbose = true;
    let out = match train(&ds, &cfg, &tc) {
        Ok(o) => o,
        Err(ModelError::NonFinite { epoch, step, last_good }) => {
            last_good.save(c.output.out.join("last_good.ckpt"))?;
            return Err(CliError::Run(format!(
                "non-finite loss at epoch {epoch}, step {step}; last good parameters in last_good.ckpt"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    cfg.save_manifest(c.output.out.join("model.cfg"))?;
    out.params.save(c.output.out.join("model.ckpt"))?;
    let mut losses = String::new();
    for (i, l) in out.epoch_losses.iter().enumerate() {
        writeln!(losses, "{i} {l:.8}").unwrap();
    }
    save_text(&c.output.out, "losses.txt", &losses)?;
    println!("trained {} steps; checksum {}", out.steps, out.params.checksum());
    Ok(())
}

fn eval(c: &EvalCmd) -> Result<(), CliError> {
    let ds = load_data(&c.source, c.output.seed)?;
    let model = if c.methods.contains(&Method::Model) { Some(need_model(&c.model)?) } else { None };
    let rates: Vec<(usize, f64)> = match c.accel {
        None => STANDARD_RATES.to_vec(),
        Some(r) => {
            let cf = c
                .cf
                .or_else(|| STANDARD_RATES.iter().find(|p| p.0 == r).map(|p| p.1))
                .unwrap_or(0.08);
            vec![(r, cf)]
        }
    };
    let mut table = format!(
        "{:<12}{:>4}{:>7}  {:<12}{:>12}{:>10}{:>9}\n",
        "pattern", "R", "cf", "method", "nmse", "psnr", "ssim"
    );
    for &pattern in &c.patterns {
        for &(accel, cf) in &rates {
            let protocol = EvalProtocol::new(pattern, accel, cf, c.output.seed);
            for &method in &c.methods {
                let r = method_recon(method, c.lambda, c.iters, model.as_ref(), c.bypass_no);
                let s = evaluate(&r, &ds, &protocol)?;
                let line = format!(
                    "{:<12}{:>4}{:>7.3}  {:<12}{:>12.4e}{:>10.3}{:>9.4}\n",
                    pattern.name(),
                    accel,
                    cf,
                    r.name(),
                    s.mean.nmse,
                    s.mean.psnr_db,
                    s.mean.ssim
                );
                print!("{line}");
                table.push_str(&line);
            }
        }
    }
    save_text(&c.output.out, "eval.txt", &table)
}

fn superres(c: &SuperresCmd) -> Result<(), CliError> {
    let ds = load_data(&c.source, c.output.seed)?;
    let s = &c.sampling;
    let protocol = EvalProtocol::new(s.pattern, s.accel, s.cf, c.output.seed);
    let model = c.model.as_deref().map(load_model).transpose()?;
    let mut recons = vec![Recon::ZeroFilled];
    if let Some((cfg, params)) = &model {
        recons.insert(0, Recon::Model { cfg, params, opts: EvalOptions::default() });
    }
    let n = ds.resolution;
    let crop = c.crop.unwrap_or(n / 2);
    let mut report: Option<TransferReport> = None;
    for r in &recons {
        let part = match c.mode {
            Mode::Image => superres_image(r, &ds, c.scale, &protocol)?,
            Mode::Fov => extend_fov(r, &ds, crop, &protocol)?,
        };
        report = Some(match report {
            None => part,
            Some(prev) => prev.merge(part)?,
        });
    }
    let report = report.expect("at least one method");
    let opts = match c.mode {
        Mode::Image => EvalOptions { image_scale: c.scale, ..EvalOptions::default() },
        Mode::Fov => EvalOptions { geometry: Some(Geometry::extended_fov(n, crop)), ..EvalOptions::default() },
    };
    if let Some(r) = recons.first().filter(|r| matches!(r, Recon::Model { .. })) {
        for (method, x) in transfer_images(r, &ds, &protocol, opts)? {
            save_image(&c.output.out, method.name(), &x)?;
        }
    }
    let text = report.to_string();
    save_text(&c.output.out, "report.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn gradcheck(c: &GradcheckCmd) -> Result<(), CliError> {
    let cases = gradient_suite()?;
    let mut text = String::new();
    for case in &cases {
        let worst = case.report.max_rel_error.iter().copied().fold(0.0f64, f64::max);
        writeln!(
            text,
            "{:<22} {} max_rel_error={worst:.3e} tol={:.1e}",
            case.name,
            if case.report.passed { "ok  " } else { "FAIL" },
            case.report.tolerance
        )
        .unwrap();
    }
    save_text(&c.output.out, "gradcheck.txt", &text)?;
    print!("{text}");
    let failed = cases.iter().filter(|c| !c.report.passed).count();
    if failed > 0 {
        return Err(CliError::Run(format!("{failed} gradient checks failed")));
    }
    println!("all {} gradient checks passed", cases.len());
    Ok(())
}
