use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use simembed::analysis::{
    adjacency_and_degrees, edges, mds_layout, pearson, subset_pairs, PairSubset, SubsetKind,
};
use simembed::datagen::{generate_answers, generate_roster_frames, generate_world, WorldConfig};
use simembed::embedding::{extract_all, loss_trace_csv, train};
use simembed::io::{
    frames_csv, load_roster, read_json, write_atomic, write_json, Manifest, ManifestEntry,
};
use simembed::losses::Kernel;
use simembed::network::{Architecture, Checkpoint};
use simembed::scoring::{
    aggregate, global_histogram, pair_histogram, read_answers_csv, read_matrix, write_matrix,
    ScoreHistogram,
};
use simembed::simcore::{default_label, Roster, SimilarityMatrix};
use simembed::Error;

use crate::args::{
    AggregateArgs, Cli, Command, EvalArgs, ExtractArgs, GraphArgs, HistogramArgs, SynthArgs,
    TrainArgs,
};
use crate::config::RunConfig;
use crate::CliError;

type CmdResult = Result<(), CliError>;

pub fn run(cli: Cli) -> CmdResult {
    if cli.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let seed = cli.seed;
    pool.install(|| match &cli.command {
        Command::Synth(a) => synth(a, seed.unwrap_or(0)),
        Command::Aggregate(a) => aggregate_cmd(a),
        Command::Train(a) => train_cmd(a, seed),
        Command::Extract(a) => extract(a),
        Command::Eval(a) => eval(a),
        Command::Graph(a) => graph(a),
        Command::Histogram(a) => histogram(a),
    })
}

fn require_files(paths: &[&Path]) -> CmdResult {
    for p in paths {
        if !p.is_file() {
            return Err(CliError::Usage(format!(
                "input file {} does not exist",
                p.display()
            )));
        }
    }
    Ok(())
}

fn create_dir(path: &Path) -> CmdResult {
    std::fs::create_dir_all(path).map_err(|source| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn histogram_csv(h: &ScoreHistogram) -> String {
    let mut out = String::from("score,count,cumulative_ratio\n");
    for (score, count) in &h.bin_counts {
        let _ = writeln!(out, "{score},{count},{}", h.cumulative_ratio[score]);
    }
    out
}

fn synth(a: &SynthArgs, seed: u64) -> CmdResult {
    if a.closed == 0 || a.closed > a.speakers {
        return Err(CliError::Usage(format!(
            "--closed must be in 1..={}, got {}",
            a.speakers, a.closed
        )));
    }
    if a.score_bound <= 0 {
        return Err(CliError::Usage("--score-bound must be positive".into()));
    }
    let mut wc = WorldConfig::new(
        a.speakers,
        a.closed,
        a.latent_dim,
        a.feature_dim,
        a.noise_std,
        seed,
    );
    if a.skewed {
        wc = wc.skewed();
    }
    wc.score_bound = a.score_bound as f64;
    if let Some(v) = a.clusters {
        wc.clusters = v;
    }
    if let Some(v) = a.cluster_strength {
        wc.cluster_strength = v;
    }
    if let Some(v) = a.spread {
        wc.spread = v;
    }
    if let Some(v) = a.latent_scale {
        wc.latent_scale = v;
    }
    let world = generate_world(&wc)?;
    let frames = generate_roster_frames(&world, a.frames, a.voiced_rate, seed)?;
    let answers = generate_answers(&world, a.listeners, a.score_bound, a.answer_noise, seed)?;
    let hist = global_histogram(&answers)?;

    let frames_dir = a.out.join("frames");
    create_dir(&frames_dir)?;
    let mut entries = Vec::with_capacity(frames.len());
    for fs in &frames {
        let name = format!("frames/{}.csv", fs.speaker.label);
        write_text(&a.out.join(&name), &frames_csv(fs))?;
        entries.push(ManifestEntry {
            index: fs.speaker.index,
            label: fs.speaker.label.clone(),
            frames: name,
        });
    }
    let manifest = Manifest {
        speakers: entries,
        closed_count: a.closed,
        feature_dim: a.feature_dim,
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    write_text(
        &a.out.join("answers.csv"),
        &simembed::scoring::answers_csv(&answers),
    )?;
    write_matrix(
        &a.out.join("ground_truth.csv"),
        &world.ground_truth_sim,
        &world.roster.labels(),
        a.closed,
    )?;

    println!(
        "speakers: {} ({} closed, {} open)",
        a.speakers,
        a.closed,
        a.speakers - a.closed
    );
    println!("frames per speaker: {}", a.frames);
    println!("answers: {}", answers.len());
    println!("negative score fraction: {:.4}", hist.negative_fraction());
    println!(
        "negative ground-truth fraction: {:.4}",
        world.negative_fraction()
    );
    Ok(())
}

fn roster_shape(a: &AggregateArgs) -> Result<(usize, Vec<String>, usize), CliError> {
    match (&a.manifest, a.speakers) {
        (Some(path), _) => {
            let manifest: Manifest = read_json(path)?;
            let roster = manifest.roster()?;
            Ok((roster.len(), roster.labels(), roster.closed_count()))
        }
        (None, Some(n)) => {
            let closed = a.closed.unwrap_or(n);
            if closed > n {
                return Err(CliError::Usage(format!(
                    "--closed {closed} exceeds --speakers {n}"
                )));
            }
            Ok((n, (0..n).map(default_label).collect(), closed))
        }
        (None, None) => Err(CliError::Usage(
            "either --manifest or --speakers is required".into(),
        )),
    }
}

fn aggregate_cmd(a: &AggregateArgs) -> CmdResult {
    require_files(&[&a.answers])?;
    if let Some(m) = &a.manifest {
        require_files(&[m])?;
    }
    if a.score_bound <= 0 {
        return Err(CliError::Usage("--score-bound must be positive".into()));
    }
    let (n, labels, closed) = roster_shape(a)?;
    let answers = read_answers_csv(&a.answers)?;
    let mut matrix = aggregate(&answers, n, a.score_bound as f64, a.min_answers)?;
    if a.normalize {
        matrix = matrix.normalize()?;
    }
    let hist = global_histogram(&answers)?;
    write_matrix(&a.out, &matrix, &labels, closed)?;
    print!("{}", histogram_csv(&hist));
    Ok(())
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>) -> CmdResult {
    let file_cfg = match &a.config {
        Some(path) => {
            require_files(&[path])?;
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    let run = file_cfg.resolve(a, seed)?;
    require_files(&[&run.manifest, &run.matrix])?;
    let echo = serde_json::to_string_pretty(&run).expect("run config serializes");
    println!("{echo}");

    let (_, frames) = load_roster(&run.manifest)?;
    let (sim, _) = read_matrix(&run.matrix)?;
    let arch = Architecture {
        hidden: run.hidden.clone(),
    };
    let outcome = train(&frames, &sim, &run.train, &arch)?;
    let checkpoint = Checkpoint::from_network(&outcome.network, run.train.loss);

    create_dir(&run.out)?;
    checkpoint.save(&run.out.join("checkpoint.json"))?;
    write_text(
        &run.out.join("train_log.csv"),
        &loss_trace_csv(&outcome.loss_trace),
    )?;
    write_text(&run.out.join("config.json"), &(echo + "\n"))?;
    if let (Some(first), Some(last)) = (outcome.loss_trace.first(), outcome.loss_trace.last()) {
        log::info!(
            "loss {first} -> {last} over {} epochs",
            outcome.loss_trace.len()
        );
    }
    Ok(())
}

fn extract(a: &ExtractArgs) -> CmdResult {
    require_files(&[&a.checkpoint, &a.manifest])?;
    let net = Checkpoint::load(&a.checkpoint)?.to_network()?;
    let (roster, frames) = load_roster(&a.manifest)?;
    let dvecs = extract_all(&net, &frames)?;
    let mut out = String::from("speaker,label");
    for k in 1..=dvecs.dim() {
        let _ = write!(out, ",d{k}");
    }
    out.push('\n');
    for id in roster.speakers() {
        let d = dvecs.get(id.index).ok_or(Error::MissingSpeaker(id.index))?;
        let _ = write!(out, "{},{}", id.index, id.label);
        for v in d {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    write_text(&a.out, &out)
}

#[derive(Debug, Serialize)]
struct SubsetReport {
    /// `None` when the subset is empty or has no variance.
    r: Option<f64>,
    pair_count: usize,
}

const REPORT_KINDS: [SubsetKind; 3] = [
    SubsetKind::All,
    SubsetKind::ClosedClosed,
    SubsetKind::ClosedOpen,
];

fn normalized(sim: SimilarityMatrix) -> SimilarityMatrix {
    if sim.is_normalized() {
        sim
    } else {
        sim.to_normalized()
    }
}

fn check_roster(sim: &SimilarityMatrix, roster: &Roster) -> CmdResult {
    if sim.len() != roster.len() {
        return Err(CliError::Core(Error::Shape(format!(
            "matrix has {} speakers, roster has {}",
            sim.len(),
            roster.len()
        ))));
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> CmdResult {
    require_files(&[&a.checkpoint, &a.manifest, &a.matrix])?;
    let net = Checkpoint::load(&a.checkpoint)?.to_network()?;
    let (roster, frames) = load_roster(&a.manifest)?;
    let (sim, _) = read_matrix(&a.matrix)?;
    let sim = normalized(sim);
    check_roster(&sim, &roster)?;
    let dvecs = extract_all(&net, &frames)?;

    let mut report = BTreeMap::new();
    for kind in REPORT_KINDS {
        for positive_only in [false, true] {
            let subset = PairSubset::new(kind, positive_only);
            let pairs = subset_pairs(&dvecs, &sim, a.kernel, subset, &roster)?;
            let xy: Vec<(f64, f64)> = pairs.iter().map(|p| (p.similarity, p.kernel)).collect();
            let r = match pearson(&xy) {
                Ok(r) => Some(r),
                Err(Error::Degenerate(msg)) => {
                    log::warn!("subset {subset}: {msg}");
                    None
                }
                Err(e) => return Err(e.into()),
            };
            report.insert(
                subset.to_string(),
                SubsetReport {
                    r,
                    pair_count: pairs.len(),
                },
            );
        }
    }
    let scatter = scatter_csv(&dvecs, &sim, a.kernel, &roster)?;

    create_dir(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_text(&a.out.join("scatter.csv"), &scatter)?;
    for (name, entry) in &report {
        match entry.r {
            Some(r) => println!("{name}: r = {r:.4} ({} pairs)", entry.pair_count),
            None => println!("{name}: r undefined ({} pairs)", entry.pair_count),
        }
    }
    Ok(())
}

/// One row per unordered pair, tagged with its closed/open kind.
fn scatter_csv(
    dvecs: &simembed::simcore::DVectorSet,
    sim: &SimilarityMatrix,
    kernel: Kernel,
    roster: &Roster,
) -> Result<String, CliError> {
    let pairs = subset_pairs(
        dvecs,
        sim,
        kernel,
        PairSubset::new(SubsetKind::All, false),
        roster,
    )?;
    let mut out = String::from("s_ij,k_ij,subset\n");
    for p in pairs {
        let kind = SubsetKind::of_pair(roster, p.i, p.j);
        let _ = writeln!(out, "{},{},{}", p.similarity, p.kernel, kind.as_str());
    }
    Ok(out)
}

fn graph(a: &GraphArgs) -> CmdResult {
    require_files(&[&a.matrix])?;
    let (sim, sidecar) = read_matrix(&a.matrix)?;
    let sim = normalized(sim);
    let layout = mds_layout(&sim, 2)?;
    let (adjacency, degrees) = adjacency_and_degrees(&sim);
    let edge_list = edges(&adjacency);

    let mut layout_csv = String::from("speaker,label,x,y\n");
    let mut degree_csv = String::from("speaker,label,degree\n");
    for (i, label) in sidecar.labels.iter().enumerate() {
        let c = layout.coordinates.row(i);
        let _ = writeln!(layout_csv, "{i},{label},{},{}", c[0], c[1]);
        let _ = writeln!(degree_csv, "{i},{label},{}", degrees[i]);
    }
    let mut edge_csv = String::from("i,j\n");
    for (i, j) in &edge_list {
        let _ = writeln!(edge_csv, "{i},{j}");
    }

    create_dir(&a.out)?;
    write_text(&a.out.join("layout.csv"), &layout_csv)?;
    write_text(&a.out.join("edges.csv"), &edge_csv)?;
    write_text(&a.out.join("degrees.csv"), &degree_csv)?;

    let n = degrees.len().max(1) as f64;
    let mean = degrees.iter().sum::<usize>() as f64 / n;
    println!("speakers: {}", degrees.len());
    println!("edges: {}", edge_list.len());
    println!(
        "degree min/mean/max: {}/{mean:.2}/{}",
        degrees.iter().min().unwrap_or(&0),
        degrees.iter().max().unwrap_or(&0)
    );
    if layout.rank_deficient {
        println!("layout: fewer than 2 positive eigenvalues, missing axes set to 0");
    }
    Ok(())
}

fn histogram(a: &HistogramArgs) -> CmdResult {
    require_files(&[&a.answers])?;
    let answers = read_answers_csv(&a.answers)?;
    let hist = match a.pair {
        Some((i, j)) => pair_histogram(&answers, i, j)?,
        None => global_histogram(&answers)?,
    };
    let csv = histogram_csv(&hist);
    if let Some(path) = &a.out {
        write_text(path, &csv)?;
    }
    print!("{csv}");
    Ok(())
}
