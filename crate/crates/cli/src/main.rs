//! Command-line pipeline: generate synthetic SAEs, fold, match,
//! compose, evaluate, and emit plot-ready CSV/JSON data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use saematch_core::io::{
    read_activations, read_permutation, read_sae, read_targets, write_activations,
    write_permutation, write_report_csv, write_sae_with_meta, Cell, PermutationRecord,
};
use saematch_core::{
    agreement, compose, delta_cross_entropy, encode_batch, encode_permute_decode,
    explained_variance, fold_params, gen_chain, gen_norm_growth_pair, gen_pair_activations,
    match_chain, match_layers, matching_score, quantile_decode_with_bias, ActivationBatch,
    BiasChoice, CostPrecision, Error, GroupWeights, MatchOptions, MatchResult, Permutation,
    SaeParams, ScoreMode, SynthSpec, WeightSet, PRNG_ALGORITHM,
};

#[derive(Parser)]
#[command(
    name = "saematch",
    version,
    about = "Align sparse-autoencoder features across layers via folded-parameter matching"
)]
struct Cli {
    /// Cap the number of worker threads (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic SAEs with planted ground-truth permutations.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Fold thresholds into the weights of an SAE file.
    Fold {
        #[arg(long)]
        sae: PathBuf,
        #[arg(long, alias = "output")]
        out: PathBuf,
    },
    /// Match the features of two SAEs and write the permutation.
    Match(MatchCmd),
    /// Compose two or more permutations along a layer path.
    Compose {
        /// Permutation files in path order (at least two).
        #[arg(long, num_args = 2.., required = true)]
        perms: Vec<PathBuf>,
        #[arg(long, alias = "output")]
        out: PathBuf,
    },
    /// Match every consecutive pair in a directory of SAEs; also emits
    /// composed and exact long-range permutations plus an agreement CSV.
    ChainMatch(ChainMatchCmd),
    /// Co-activation score of matched features over activation files.
    Score {
        #[arg(long)]
        features_a: PathBuf,
        #[arg(long)]
        features_b: PathBuf,
        #[arg(long)]
        perm: PathBuf,
        /// Jaccard overlap instead of source-conditional probability.
        #[arg(long)]
        symmetric: bool,
        /// Output JSON path (stdout when omitted).
        #[arg(long, alias = "output")]
        out: Option<PathBuf>,
    },
    /// Explained variance of encode-permute-decode layer skipping
    /// (optionally at MSE quantiles) against reference hidden states.
    PruneSim(PruneSimCmd),
    /// Cross-entropy delta between original and modified logits.
    DeltaCe {
        #[arg(long)]
        logits_orig: PathBuf,
        #[arg(long)]
        logits_mod: PathBuf,
        /// JSON document {"targets": [..]}.
        #[arg(long)]
        targets: PathBuf,
        /// Drop the first token from logits and targets.
        #[arg(long)]
        skip_first_token: bool,
        /// Output JSON path (stdout when omitted).
        #[arg(long, alias = "output")]
        out: Option<PathBuf>,
    },
    /// Aggregate permutation files into plot-ready CSV tables.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Subcommand)]
enum SynthCmd {
    /// One planted pair: sae_a.saem, sae_b.saem, truth_0_1.json.
    Pair(SynthPairCmd),
    /// A planted chain: sae_<t>.saem plus step and cumulative truths.
    Chain(SynthChainCmd),
}

#[derive(Args)]
struct SynthCommon {
    /// Hidden dimension.
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// Number of features.
    #[arg(long, default_value_t = 256)]
    f: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise std as a fraction of per-feature folded-weight norm.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Per-layer hidden-norm multiplier carried by the thresholds.
    #[arg(long, default_value_t = 1.0)]
    scale_growth: f64,
    /// Threshold range (drawn log-uniformly).
    #[arg(long, default_value_t = 0.25)]
    theta_lo: f64,
    #[arg(long, default_value_t = 4.0)]
    theta_hi: f64,
    /// Also emit activation files with this many tokens.
    #[arg(long)]
    tokens: Option<usize>,
    /// Target active features per token for emitted activations.
    #[arg(long, default_value_t = 8)]
    active: usize,
    /// Relative noise on emitted hidden states.
    #[arg(long, default_value_t = 0.01)]
    act_noise: f64,
    #[arg(long, alias = "output")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthPairCmd {
    #[command(flatten)]
    common: SynthCommon,
}

#[derive(Args)]
struct SynthChainCmd {
    #[command(flatten)]
    common: SynthCommon,
    #[arg(long, default_value_t = 8)]
    chain_len: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum WeightsArg {
    /// Decoder columns only.
    Dec,
    /// Encoder rows only.
    Enc,
    /// Encoder rows, decoder columns and encoder bias.
    EncDecBias,
}

impl From<WeightsArg> for WeightSet {
    fn from(w: WeightsArg) -> Self {
        match w {
            WeightsArg::Dec => WeightSet::DecoderOnly,
            WeightsArg::Enc => WeightSet::EncoderOnly,
            WeightsArg::EncDecBias => WeightSet::EncoderDecoderBias,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum StorageArg {
    F64,
    F32,
}

#[derive(Args)]
struct MatchFlags {
    /// Match on raw weights instead of folded parameters.
    #[arg(long)]
    unfolded: bool,
    /// Weight groups entering the cost.
    #[arg(long, value_enum, default_value_t = WeightsArg::EncDecBias)]
    weights: WeightsArg,
    /// Per-group cost multipliers.
    #[arg(long, default_value_t = 1.0)]
    weight_dec: f64,
    #[arg(long, default_value_t = 1.0)]
    weight_enc: f64,
    #[arg(long, default_value_t = 1.0)]
    weight_bias: f64,
    /// Cost-matrix storage precision (accumulation is always 64-bit).
    #[arg(long, value_enum, default_value_t = StorageArg::F64)]
    storage: StorageArg,
}

impl MatchFlags {
    fn options(&self) -> MatchOptions {
        MatchOptions {
            folded: !self.unfolded,
            weight_set: self.weights.into(),
            group_weights: GroupWeights {
                decoder: self.weight_dec,
                encoder: self.weight_enc,
                bias: self.weight_bias,
            },
            precision: match self.storage {
                StorageArg::F64 => CostPrecision::F64,
                StorageArg::F32 => CostPrecision::F32,
            },
        }
    }
}

#[derive(Args)]
struct MatchCmd {
    #[arg(long)]
    sae_a: PathBuf,
    #[arg(long)]
    sae_b: PathBuf,
    #[command(flatten)]
    flags: MatchFlags,
    #[arg(long, alias = "output")]
    out: PathBuf,
}

#[derive(Args)]
struct ChainMatchCmd {
    /// Directory of SAEM files (activation files are skipped).
    #[arg(long)]
    saes: PathBuf,
    #[command(flatten)]
    flags: MatchFlags,
    #[arg(long, alias = "output")]
    out_dir: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum BiasArg {
    Target,
    Source,
}

#[derive(Args)]
struct PruneSimCmd {
    #[arg(long)]
    sae_t: PathBuf,
    #[arg(long)]
    sae_t1: PathBuf,
    #[arg(long)]
    perm: PathBuf,
    #[arg(long)]
    hidden_t: PathBuf,
    #[arg(long)]
    hidden_t1_ref: PathBuf,
    /// MSE quantile for hybrid decoding; repeatable. Without it, plain
    /// encode-permute-decode is evaluated.
    #[arg(long)]
    quantile: Vec<f64>,
    /// Which layer's decoder bias the hybrid decode adds.
    #[arg(long, value_enum, default_value_t = BiasArg::Target)]
    bias: BiasArg,
    #[arg(long, alias = "output")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Per-layer-pair matched MSE summary from permutation files.
    MseByLayer {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long, alias = "output")]
        out: PathBuf,
    },
    /// Mean agreement between composed and exact permutations, grouped
    /// by layer distance.
    AgreementByDistance {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long, alias = "output")]
        out: PathBuf,
    },
}

enum CliError {
    /// Unreadable or malformed data: exit code 3.
    Data(String),
    /// Domain, state or numerical failures: exit code 4.
    Numeric(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::Format(_) | Error::Io(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io error: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(msg)) => {
            eprintln!("saematch: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("saematch: {msg}");
            ExitCode::from(4)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(SynthCmd::Pair(cmd)) => synth_pair(cmd),
        Command::Synth(SynthCmd::Chain(cmd)) => synth_chain(cmd),
        Command::Fold { sae, out } => {
            let folded = fold_params(&read_sae(&sae)?)?;
            write_sae_with_meta(&folded, &out, &BTreeMap::new())?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Match(cmd) => do_match(cmd),
        Command::Compose { perms, out } => do_compose(&perms, &out),
        Command::ChainMatch(cmd) => chain_match(cmd),
        Command::Score { features_a, features_b, perm, symmetric, out } => {
            score(&features_a, &features_b, &perm, symmetric, out.as_deref())
        }
        Command::PruneSim(cmd) => prune_sim(cmd),
        Command::DeltaCe { logits_orig, logits_mod, targets, skip_first_token, out } => {
            delta_ce(&logits_orig, &logits_mod, &targets, skip_first_token, out.as_deref())
        }
        Command::Report(ReportCmd::MseByLayer { in_dir, out }) => mse_by_layer(&in_dir, &out),
        Command::Report(ReportCmd::AgreementByDistance { in_dir, out }) => {
            agreement_by_distance(&in_dir, &out)
        }
    }
}

fn synth_spec(common: &SynthCommon, chain_len: usize) -> SynthSpec {
    SynthSpec {
        d: common.d,
        f: common.f,
        seed: common.seed,
        noise_sigma: common.noise,
        theta_log_range: (common.theta_lo, common.theta_hi),
        scale_growth: common.scale_growth,
        chain_len,
    }
}

fn generator_meta(common: &SynthCommon) -> BTreeMap<String, Value> {
    let mut meta = BTreeMap::new();
    meta.insert("prng".to_string(), json!(PRNG_ALGORITHM));
    meta.insert("seed".to_string(), json!(common.seed));
    meta.insert("noise_sigma".to_string(), json!(common.noise));
    meta.insert("scale_growth".to_string(), json!(common.scale_growth));
    meta.insert("theta_lo".to_string(), json!(common.theta_lo));
    meta.insert("theta_hi".to_string(), json!(common.theta_hi));
    meta
}

fn synth_pair(cmd: SynthPairCmd) -> CliResult<()> {
    let common = cmd.common;
    std::fs::create_dir_all(&common.out_dir)?;
    let spec = synth_spec(&common, 2);
    let (a, b, truth) = gen_norm_growth_pair(&spec)?;
    let meta = generator_meta(&common);

    let mut written = Vec::new();
    for (sae, name) in [(&a, "sae_a.saem"), (&b, "sae_b.saem")] {
        let path = common.out_dir.join(name);
        write_sae_with_meta(sae, &path, &meta)?;
        written.push(path);
    }

    let truth_path = common.out_dir.join("truth_0_1.json");
    write_permutation(&PermutationRecord::from_permutation(&truth), &truth_path)?;
    written.push(truth_path);

    if let Some(tokens) = common.tokens {
        let pair = gen_pair_activations(
            &a,
            &b,
            &truth,
            tokens,
            common.seed,
            common.active,
            common.act_noise,
        )?;
        let feats_a = encode_batch(&a, &pair.hidden_t)?;
        // features that co-fire with the source stream, for `score`
        let feats_b_ref = encode_batch(&b, &pair.hidden_t1_coact)?;
        for (batch, name) in [
            (&pair.hidden_t, "hidden_0.saem"),
            (&pair.hidden_t1_ref, "hidden_1_ref.saem"),
            (&feats_a, "features_0.saem"),
            (&feats_b_ref, "features_1_ref.saem"),
        ] {
            let path = common.out_dir.join(name);
            write_activations(batch, &path)?;
            written.push(path);
        }
    }
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn synth_chain(cmd: SynthChainCmd) -> CliResult<()> {
    let common = cmd.common;
    std::fs::create_dir_all(&common.out_dir)?;
    let spec = synth_spec(&common, cmd.chain_len);
    let chain = gen_chain(&spec)?;
    let meta = generator_meta(&common);

    let mut written = Vec::new();
    for sae in &chain.saes {
        let path = common.out_dir.join(format!("sae_{:03}.saem", sae.layer_id));
        write_sae_with_meta(sae, &path, &meta)?;
        written.push(path);
    }
    for truth in &chain.step_truths {
        let path = common
            .out_dir
            .join(format!("truth_{}_{}.json", truth.from_layer, truth.to_layer));
        write_permutation(&PermutationRecord::from_permutation(truth), &path)?;
        written.push(path);
    }
    // cumulative truths span more than one step from layer 0
    for truth in chain.cumulative_truths.iter().skip(1) {
        let path = common
            .out_dir
            .join(format!("truth_{}_{}.json", truth.from_layer, truth.to_layer));
        write_permutation(&PermutationRecord::from_permutation(truth), &path)?;
        written.push(path);
    }

    if let Some(tokens) = common.tokens {
        let mut wrote_source = false;
        for (k, truth) in chain.cumulative_truths.iter().enumerate() {
            let sae_k = &chain.saes[k + 1];
            let pair = gen_pair_activations(
                &chain.saes[0],
                sae_k,
                truth,
                tokens,
                common.seed,
                common.active,
                common.act_noise,
            )?;
            if !wrote_source {
                let feats_0 = encode_batch(&chain.saes[0], &pair.hidden_t)?;
                for (batch, name) in
                    [(&pair.hidden_t, "hidden_000.saem"), (&feats_0, "features_000.saem")]
                {
                    let path = common.out_dir.join(name);
                    write_activations(batch, &path)?;
                    written.push(path);
                }
                wrote_source = true;
            }
            // decode-consistent reference plus co-firing features
            let feats_ref = encode_batch(sae_k, &pair.hidden_t1_coact)?;
            for (batch, prefix) in [(&pair.hidden_t1_ref, "hidden"), (&feats_ref, "features")] {
                let path = common
                    .out_dir
                    .join(format!("{prefix}_{:03}_ref.saem", sae_k.layer_id));
                write_activations(batch, &path)?;
                written.push(path);
            }
        }
    }
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn do_match(cmd: MatchCmd) -> CliResult<()> {
    let a = read_sae(&cmd.sae_a)?;
    let b = read_sae(&cmd.sae_b)?;
    let result = match_layers(&a, &b, &cmd.flags.options())?;
    write_permutation(&PermutationRecord::from_match_result(&result), &cmd.out)?;
    println!(
        "matched layers {} -> {}: total cost {:.6e} over {} features; wrote {}",
        result.permutation.from_layer,
        result.permutation.to_layer,
        result.total_cost,
        result.permutation.len(),
        cmd.out.display()
    );
    Ok(())
}

fn do_compose(perms: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut records = perms.iter().map(read_permutation);
    let first = records.next().expect("clap enforces >= 2 perms")?;
    let mut acc = first.permutation()?;
    for record in records {
        let next = record?.permutation()?;
        acc = compose(&acc, &next)?;
    }
    write_permutation(&PermutationRecord::from_permutation(&acc), out)?;
    println!(
        "composed {} permutations: layers {} -> {}; wrote {}",
        perms.len(),
        acc.from_layer,
        acc.to_layer,
        out.display()
    );
    Ok(())
}

/// Loads every SAE container in a directory, sorted by layer id.
fn load_sae_dir(dir: &Path) -> CliResult<Vec<SaeParams>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "saem"))
        .collect();
    paths.sort();
    let mut saes = Vec::new();
    for path in paths {
        match read_sae(&path) {
            Ok(sae) => saes.push(sae),
            Err(Error::KindMismatch(_)) => continue, // activation file
            Err(other) => return Err(other.into()),
        }
    }
    if saes.is_empty() {
        return Err(CliError::Data(format!(
            "no SAE containers found in {}",
            dir.display()
        )));
    }
    saes.sort_by_key(|sae| sae.layer_id);
    Ok(saes)
}

fn chain_match(cmd: ChainMatchCmd) -> CliResult<()> {
    let saes = load_sae_dir(&cmd.saes)?;
    std::fs::create_dir_all(&cmd.out_dir)?;
    let opts = cmd.flags.options();
    let chain = match_chain(&saes, &opts)?;

    for result in chain.results() {
        let path = cmd.out_dir.join(format!(
            "match_{:03}_{:03}.json",
            result.permutation.from_layer, result.permutation.to_layer
        ));
        write_permutation(&PermutationRecord::from_match_result(result), &path)?;
    }

    let mut rows: Vec<Vec<Cell>> = Vec::new();
    for k in 2..saes.len() {
        let composed = chain.composed_span(0, k)?;
        let exact = match_layers(&saes[0], &saes[k], &opts)?;
        let agree = agreement(&composed, &exact.permutation)?;

        let composed_path = cmd.out_dir.join(format!(
            "composed_{:03}_{:03}.json",
            composed.from_layer, composed.to_layer
        ));
        write_permutation(&PermutationRecord::from_permutation(&composed), &composed_path)?;
        let exact_path = cmd.out_dir.join(format!(
            "exact_{:03}_{:03}.json",
            saes[0].layer_id, saes[k].layer_id
        ));
        write_permutation(&PermutationRecord::from_match_result(&exact), &exact_path)?;

        rows.push(vec![
            Cell::Int(saes[0].layer_id as i64),
            Cell::Int(saes[k].layer_id as i64),
            Cell::Int(k as i64),
            Cell::Float(agree),
        ]);
    }
    let csv = cmd.out_dir.join("agreement.csv");
    write_report_csv(&csv, &["from_layer", "to_layer", "distance", "agreement"], &rows)?;
    println!(
        "matched {} consecutive pairs and {} spans; wrote {}",
        chain.results().len(),
        rows.len(),
        csv.display()
    );
    Ok(())
}

fn score(
    features_a: &Path,
    features_b: &Path,
    perm: &Path,
    symmetric: bool,
    out: Option<&Path>,
) -> CliResult<()> {
    let a = read_activations(features_a)?;
    let b = read_activations(features_b)?;
    let p = read_permutation(perm)?.permutation()?;
    let mode = if symmetric { ScoreMode::Symmetric } else { ScoreMode::Conditional };
    let result = matching_score(&a, &b, &p, mode)?;
    let doc = json!({
        "score": result.score,
        "n_valid_pairs": result.n_valid_pairs,
        "n_features": result.per_pair.len(),
        "mode": if symmetric { "symmetric" } else { "conditional" },
        "per_pair": result.per_pair,
    });
    emit_json(&doc, out)
}

fn match_result_from_record(record: &PermutationRecord) -> CliResult<MatchResult> {
    let permutation = record.permutation()?;
    let per_pair_mse = record.per_pair_mse.clone().ok_or_else(|| {
        CliError::Numeric(
            "permutation document carries no per_pair_mse; quantile decoding needs a match result"
                .to_string(),
        )
    })?;
    Ok(MatchResult {
        total_cost: record.total_cost.unwrap_or_else(|| per_pair_mse.iter().sum()),
        per_pair_mse,
        permutation,
        weight_set: WeightSet::EncoderDecoderBias,
        folded: true,
        config_fingerprint: record.config_fingerprint.clone().unwrap_or_default(),
    })
}

fn prune_sim(cmd: PruneSimCmd) -> CliResult<()> {
    let sae_t = read_sae(&cmd.sae_t)?;
    let sae_t1 = read_sae(&cmd.sae_t1)?;
    let record = read_permutation(&cmd.perm)?;
    let hidden_t = read_activations(&cmd.hidden_t)?;
    let hidden_ref = read_activations(&cmd.hidden_t1_ref)?;

    let bias = match cmd.bias {
        BiasArg::Target => BiasChoice::Target,
        BiasArg::Source => BiasChoice::Source,
    };
    let mut rows: Vec<Vec<Cell>> = Vec::new();
    let mut evaluate =
        |label: &str, quantile: Option<f64>, approx: &ActivationBatch| -> CliResult<()> {
            let ev = explained_variance(approx, &hidden_ref)?;
            rows.push(vec![
                Cell::Str(label.to_string()),
                match quantile {
                    Some(q) => Cell::Float(q),
                    None => Cell::Str(String::new()),
                },
                Cell::Float(ev.ev),
                Cell::Float(ev.residual_ratio),
                Cell::Int(approx.num_tokens() as i64),
            ]);
            Ok(())
        };

    if cmd.quantile.is_empty() {
        let p = record.permutation()?;
        let approx = encode_permute_decode(&sae_t, &sae_t1, &p, &hidden_t)?;
        evaluate("epd", None, &approx)?;
    } else {
        let result = match_result_from_record(&record)?;
        for &q in &cmd.quantile {
            let approx = quantile_decode_with_bias(&sae_t, &sae_t1, &result, q, &hidden_t, bias)?;
            evaluate("quantile", Some(q), &approx)?;
        }
    }
    write_report_csv(
        &cmd.out,
        &["method", "quantile", "explained_variance", "residual_ratio", "n_tokens"],
        &rows,
    )?;
    println!("wrote {}", cmd.out.display());
    Ok(())
}

fn delta_ce(
    logits_orig: &Path,
    logits_mod: &Path,
    targets_path: &Path,
    skip_first_token: bool,
    out: Option<&Path>,
) -> CliResult<()> {
    let mut orig = read_activations(logits_orig)?;
    let mut modified = read_activations(logits_mod)?;
    let mut targets = read_targets(targets_path)?;
    if skip_first_token {
        if orig.num_tokens() < 2 || targets.is_empty() {
            return Err(CliError::Numeric(
                "cannot skip the first token of a single-token batch".to_string(),
            ));
        }
        let drop_first = |batch: &ActivationBatch| -> CliResult<ActivationBatch> {
            let data = batch.data.slice(ndarray::s![1.., ..]).to_owned();
            Ok(ActivationBatch::new(data, batch.kind, batch.layer_id)?)
        };
        orig = drop_first(&orig)?;
        modified = drop_first(&modified)?;
        targets.remove(0);
    }
    let delta = delta_cross_entropy(&modified, &orig, &targets)?;
    let doc = json!({
        "delta_ce_nats": delta,
        "n_tokens": targets.len(),
        "skipped_first_token": skip_first_token,
    });
    emit_json(&doc, out)
}

fn emit_json(doc: &Value, out: Option<&Path>) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(doc).expect("json serializes");
    text.push('\n');
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// All permutation records in a directory, sorted by file name.
fn load_records(dir: &Path) -> CliResult<Vec<PermutationRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    let mut records = Vec::new();
    for path in paths {
        // directories may hold other JSON documents (scores, targets)
        if let Ok(record) = read_permutation(&path) {
            records.push(record);
        }
    }
    Ok(records)
}

fn mse_by_layer(in_dir: &Path, out: &Path) -> CliResult<()> {
    let mut records: Vec<PermutationRecord> = load_records(in_dir)?
        .into_iter()
        .filter(|r| r.per_pair_mse.is_some())
        .collect();
    records.sort_by_key(|r| (r.from_layer, r.to_layer));
    if records.is_empty() {
        return Err(CliError::Data(format!(
            "no permutation documents with per-pair costs in {}",
            in_dir.display()
        )));
    }
    let mut rows: Vec<Vec<Cell>> = Vec::new();
    for record in records {
        let mse = record.per_pair_mse.as_ref().expect("filtered");
        let n = mse.len() as f64;
        let mean = mse.iter().sum::<f64>() / n;
        let min = mse.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = mse.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        rows.push(vec![
            Cell::Int(record.from_layer as i64),
            Cell::Int(record.to_layer as i64),
            Cell::Int(mse.len() as i64),
            Cell::Float(record.total_cost.unwrap_or_else(|| mse.iter().sum())),
            Cell::Float(mean),
            Cell::Float(min),
            Cell::Float(max),
        ]);
    }
    write_report_csv(
        out,
        &["from_layer", "to_layer", "n_features", "total_cost", "mean_mse", "min_mse", "max_mse"],
        &rows,
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn agreement_by_distance(in_dir: &Path, out: &Path) -> CliResult<()> {
    let records = load_records(in_dir)?;
    let mut composed: Vec<(u32, u32, Permutation)> = Vec::new();
    let mut exact: BTreeMap<(u32, u32), (bool, Permutation)> = BTreeMap::new();
    for record in &records {
        let p = record.permutation()?;
        match record.provenance {
            saematch_core::Provenance::Composed => {
                composed.push((record.from_layer, record.to_layer, p));
            }
            saematch_core::Provenance::Exact => {
                // prefer records carrying match costs over planted truths
                let key = (record.from_layer, record.to_layer);
                let has_costs = record.per_pair_mse.is_some();
                match exact.get(&key) {
                    Some((true, _)) => {}
                    _ if has_costs => {
                        exact.insert(key, (true, p));
                    }
                    None => {
                        exact.insert(key, (false, p));
                    }
                    Some((false, _)) => {}
                }
            }
        }
    }
    let mut by_distance: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (from, to, p) in &composed {
        if let Some((_, reference)) = exact.get(&(*from, *to)) {
            let agree = agreement(p, reference)?;
            let entry = by_distance.entry(to - from).or_insert((0.0, 0));
            entry.0 += agree;
            entry.1 += 1;
        }
    }
    if by_distance.is_empty() {
        return Err(CliError::Data(format!(
            "no composed/exact permutation pairs share endpoints in {}",
            in_dir.display()
        )));
    }
    let rows: Vec<Vec<Cell>> = by_distance
        .iter()
        .map(|(distance, (sum, count))| {
            vec![
                Cell::Int(*distance as i64),
                Cell::Float(sum / *count as f64),
                Cell::Int(*count as i64),
            ]
        })
        .collect();
    write_report_csv(out, &["distance", "mean_agreement", "n_pairs"], &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}
