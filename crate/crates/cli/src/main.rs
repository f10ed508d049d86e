//! Operator CLI: minibatch planning, toy-scale training, decoding, mask
//! inspection, and a whole-model gradient check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctasr_core::checkpoint;
use ctasr_core::config::{FusionMethod, RunConfig};
use ctasr_core::error::{Error, Result};
use ctasr_core::features::DirStore;
use ctasr_core::fusion::{pool_bn_states, ContextCache};
use ctasr_core::gradcheck::{central_diff, max_rel_err};
use ctasr_core::masks::build_composed;
use ctasr_core::scheduler::{largest_prefix_within, plan, Manifest};
use ctasr_core::tape::Tape;
use ctasr_core::tensor::Tensor;
use ctasr_core::trainer::{
    decode_corpus, encoder_bn_states, init_params, pack_state, train, unpack_state, utterance_loss,
};

#[derive(Parser)]
#[command(name = "ctasr", version, about = "Contextual Conformer-Transducer toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Plan minibatches for a manifest and report utilization with and
    /// without utterance splicing (at an equal step budget).
    Plan(PlanArgs),
    /// Train on a manifest; writes a checkpoint and a per-step loss file.
    Train(TrainArgs),
    /// Greedy-decode a manifest with a trained checkpoint.
    Decode(DecodeArgs),
    /// Attention-mask utilities.
    Mask {
        #[command(subcommand)]
        cmd: MaskCmd,
    },
    /// Finite-difference check of the whole contextual model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Directory feature paths resolve against (default: the manifest's).
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Overrides the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoint.ckpt and loss.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MaskCmd {
    /// Print the composed previous‖current mask as a 0/1 grid.
    Dump(MaskDumpArgs),
}

#[derive(Args)]
struct MaskDumpArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Current utterance length in subsampled frames.
    #[arg(long)]
    frames: usize,
    /// Previous utterances' subsampled lengths, comma-separated, oldest first.
    #[arg(long)]
    prev: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::parse(&std::fs::read_to_string(path)?)
}

fn features_dir(explicit: Option<PathBuf>, manifest: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| {
        manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

fn cmd_plan(args: PlanArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let manifest = load_manifest(&args.manifest)?;
    let (rows, capacity) = (cfg.scheduler.rows, cfg.scheduler.capacity);
    let spliced = plan(&manifest, rows, capacity, true)?;
    println!("rows {rows}, capacity {capacity} frames");
    println!("spliced occupancy:");
    print!("{}", spliced.grid_string());
    let cap_total = rows * capacity * spliced.steps;
    println!(
        "with splicing:    {}/{} frames over {} steps, utilization {:.4}",
        spliced.filled_frames(),
        cap_total,
        spliced.steps,
        spliced.utilization()
    );
    // baseline at the same step budget: the largest manifest prefix whose
    // one-utterance-per-step plan still fits
    let prefix = largest_prefix_within(&manifest, rows, capacity, spliced.steps)?;
    let baseline = plan(&prefix, rows, capacity, false)?;
    let base_total = rows * capacity * baseline.steps;
    println!(
        "without splicing: {}/{} frames over {} steps, utilization {:.4}",
        baseline.filled_frames(),
        base_total,
        baseline.steps,
        baseline.utilization()
    );
    println!(
        "delta: {:.1} percentage points",
        (spliced.utilization() - baseline.utilization()) * 100.0
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(Some(&args.config))?;
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
    }
    let manifest = load_manifest(&args.manifest)?;
    let store = DirStore {
        base: features_dir(args.features_dir, &args.manifest),
    };
    let out = train(&cfg, &manifest, &store)?;
    std::fs::create_dir_all(&args.out)?;
    let loss_text: String = out.losses.iter().map(|l| format!("{l:.17e}\n")).collect();
    std::fs::write(args.out.join("loss.txt"), loss_text)?;
    let packed = pack_state(&out.params, &out.bn_states, &out.pool_bn);
    checkpoint::save(&args.out.join("checkpoint.ckpt"), &packed)?;
    match (out.losses.first(), out.losses.last()) {
        (Some(first), Some(last)) => {
            println!(
                "trained {} steps: loss {first:.6} -> {last:.6}",
                out.losses.len()
            );
        }
        _ => println!("trained 0 steps (empty manifest)"),
    }
    println!("wrote {}", args.out.join("checkpoint.ckpt").display());
    Ok(())
}

fn cmd_decode(args: DecodeArgs) -> Result<()> {
    let cfg = load_config(Some(&args.config))?;
    let manifest = load_manifest(&args.manifest)?;
    let store = DirStore {
        base: features_dir(args.features_dir, &args.manifest),
    };
    let packed = checkpoint::load(&args.checkpoint)?;
    let (params, bn, pool_bn) = unpack_state(&cfg, &packed)?;
    let report = decode_corpus(&cfg, &params, &bn, &pool_bn, &manifest, &store)?;
    let mut text = String::new();
    for u in &report.utterances {
        let hyp: Vec<String> = u.hypothesis.iter().map(usize::to_string).collect();
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            u.conversation,
            u.utterance_id,
            hyp.join(",")
        ));
    }
    text.push_str(&format!("TER\t{:.6}\n", report.ter));
    print!("{text}");
    if let Some(path) = args.out {
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn cmd_mask_dump(args: MaskDumpArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    if args.frames == 0 {
        return Err(Error::MaskSpec("--frames must be >= 1".into()));
    }
    let prev: Vec<usize> = match args.prev.as_deref() {
        None | Some("") => Vec::new(),
        Some(s) => s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::MaskSpec(format!("bad previous length {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let mask = build_composed(&cfg.mask_spec(prev), args.frames)?;
    mask.validate()?;
    print!("{}", mask.grid_string());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    // small contextual model: 1 block, d=4, embedding-concat fusion with one
    // cached utterance, checked parameter by parameter
    let mut cfg = RunConfig::default();
    cfg.model.blocks = 1;
    cfg.model.d_model = 4;
    cfg.model.n_heads = 2;
    cfg.model.conv_kernel = 3;
    cfg.model.predictor_units = 4;
    cfg.model.vocab = 4;
    cfg.model.input_dim = 4;
    cfg.model.subsample_channels = 2;
    cfg.model.joint_dim = 4;
    cfg.fusion.method = FusionMethod::EmbedConcat;

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let params = init_params(&cfg, args.seed);
    let bn = encoder_bn_states(&cfg);
    let pool_bn = pool_bn_states(&cfg);
    let feats = Tensor::randn(&[8, cfg.model.input_dim], 1.0, &mut rng);
    let labels = vec![1usize, 2];

    // cache one baseline pass of a second utterance
    let prev_feats = Tensor::randn(&[8, cfg.model.input_dim], 1.0, &mut rng);
    let mut cache = ContextCache::new(1);
    {
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape);
        let mut base = cfg.clone();
        base.fusion.method = FusionMethod::None;
        let (_, enc) = utterance_loss(
            &mut tape,
            &bp,
            &base,
            &prev_feats,
            &labels,
            &ContextCache::new(0),
            false,
            &bn,
            &pool_bn,
        )?;
        cache.push(enc.to_cache_entry(&tape, &prev_feats));
    }

    let loss_of = |ps: &ctasr_core::params::ParamSet| -> f64 {
        let mut tape = Tape::new();
        let bp = ps.bind(&mut tape);
        let (loss, _) =
            utterance_loss(&mut tape, &bp, &cfg, &feats, &labels, &cache, true, &bn, &pool_bn)
                .expect("forward pass");
        tape.value(loss).data[0]
    };

    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let (loss, _) =
        utterance_loss(&mut tape, &bp, &cfg, &feats, &labels, &cache, true, &bn, &pool_bn)?;
    let grads = tape.backward(loss);

    let mut worst: (String, f64) = (String::new(), 0.0);
    for name in params.names().map(str::to_string).collect::<Vec<_>>() {
        let base = params.get(&name).unwrap().clone();
        let analytic = grads.get_or_zeros(bp.var(&name), &base.shape);
        let numeric = central_diff(
            |probe| {
                let mut ps = params.clone();
                ps.insert(name.clone(), probe.clone());
                loss_of(&ps)
            },
            &base,
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric);
        println!("{name}: max rel err {err:.3e}");
        if err > worst.1 {
            worst = (name, err);
        }
    }
    println!("worst: {} ({:.3e})", worst.0, worst.1);
    if worst.1 < 1e-4 {
        println!("gradcheck PASS");
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gradcheck failed: {} rel err {:.3e}",
            worst.0, worst.1
        )))
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::Mask { cmd: MaskCmd::Dump(a) } => cmd_mask_dump(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
