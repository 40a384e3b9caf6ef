use std::path::{Path, PathBuf};

use seal_core::adapter::{leakage_report, load_embedding, save_embedding, Reference};
use seal_core::backbone::{load_checkpoint, save_checkpoint, PretrainOptions};
use seal_core::imaging::{heatmap, GrayGrid, RgbImage};
use seal_core::regularizer::select_semantic_layers;
use seal_core::synth::generate_corpus;
use seal_core::tagkit::{
    attribute_edit, build_prompt, intra_similarity, parse_manifest, parse_tag_line_auto,
    serialize_tag, validate_manifest, Attribute, Domain, TagRecord, TrigramEmbedder, PLACEHOLDER,
};
use seal_core::{
    adapt, validate_config, AdaptationConfig, Backbone, ConceptEmbedding, LayerDiagnostic,
    SealError,
};
use serde::Serialize;

use crate::corpus_io::{load_corpus, write_corpus};
use crate::manifest::ManifestBuilder;
use crate::{
    AdaptArgs, CliError, CliResult, Command, CorpusArgs, GenerateArgs, InspectArgs, PretrainArgs,
    TagsCommand,
};

pub(crate) const EMBEDDING_FILE: &str = "embedding.seal";
pub(crate) const MANIFEST_FILE: &str = "manifest.json";
pub(crate) const METRICS_FILE: &str = "metrics.json";

pub(crate) fn dispatch(cmd: &Command, argv: &[String]) -> CliResult<()> {
    match cmd {
        Command::Corpus(a) => corpus(a, argv),
        Command::Pretrain(a) => pretrain(a, argv),
        Command::Adapt(a) => adapt_cmd(a, argv),
        Command::Generate(a) => generate(a, argv),
        Command::InspectAttn(a) => inspect(a, argv),
        Command::Tags(t) => tags(t),
    }
}

/// `dir/name.ckpt` with suffix `.loss.csv` becomes `dir/name.loss.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn read_first_record(path: &Path) -> CliResult<TagRecord> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text)?
        .into_iter()
        .next()
        .ok_or_else(|| SealError::Tag(format!("no tag record in {}", path.display())).into())
}

fn load_reference(image: &Path, mask: &Path) -> CliResult<Reference> {
    Ok(Reference {
        image: RgbImage::load_png(image)?,
        mask: GrayGrid::load_png(mask)?,
    })
}

fn load_merged(path: &Path) -> CliResult<ConceptEmbedding> {
    let (set, _) = load_embedding(path, None)?;
    set.merged().cloned().ok_or_else(|| {
        SealError::MalformedHeader("embedding file has no merged vector".into()).into()
    })
}

fn corpus(a: &CorpusArgs, argv: &[String]) -> CliResult<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let mut m = ManifestBuilder::new("corpus", argv);
    m.seed("corpus", a.seed)
        .config(serde_json::json!({ "n": a.n }))?;
    let scenes = generate_corpus(a.seed, a.n)?;
    for p in write_corpus(&a.out, a.seed, &scenes)? {
        m.output(&p);
    }
    m.write(&a.out.join(MANIFEST_FILE))?;
    println!("wrote {} scenes to {}", a.n, a.out.display());
    Ok(())
}

fn pretrain(a: &PretrainArgs, argv: &[String]) -> CliResult<()> {
    let scenes = load_corpus(&a.corpus)?;
    let opts = PretrainOptions {
        batch_size: a.batch_size,
        learning_rate: a.lr,
        ..PretrainOptions::default()
    };
    let mut m = ManifestBuilder::new("pretrain", argv);
    m.seed("pretrain", a.seed)
        .seed("arch", a.arch_seed)
        .input("corpus", &a.corpus)
        .config(serde_json::json!({ "steps": a.steps, "options": opts }))?;
    let (bb, report) = Backbone::build(a.arch_seed).pretrain(&scenes, a.steps, a.seed, &opts)?;
    save_checkpoint(&bb, &a.out)?;
    let csv_path = sibling(&a.out, ".loss.csv");
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(&csv_path, csv)?;
    m.output(&a.out).output(&csv_path);
    m.write(&sibling(&a.out, ".manifest.json"))?;
    if let Some(last) = report.losses.last() {
        println!("pretrained {} steps, final batch loss {last:.5}", a.steps);
    }
    Ok(())
}

fn adapt_cmd(a: &AdaptArgs, argv: &[String]) -> CliResult<()> {
    let cfg = validate_config(AdaptationConfig {
        steps: a.steps,
        k: a.k,
        learning_rate: a.lr,
        lambda_spatial: a.lambda_spatial,
        lambda_bind: a.lambda_bind,
        lambda_supp: a.lambda_supp,
        base_seed: a.seed,
        ..AdaptationConfig::default()
    })?;
    let bb = load_checkpoint(&a.checkpoint)?;
    let reference = load_reference(&a.reference, &a.mask)?;
    let tags = read_first_record(&a.tags)?;
    let label = if cfg.is_control() { "control" } else { "seal" };

    let mut m = ManifestBuilder::new("adapt", argv);
    m.label(label)
        .seed("base", cfg.base_seed)
        .input("checkpoint", &a.checkpoint)
        .input("reference", &a.reference)
        .input("mask", &a.mask)
        .input("tags", &a.tags)
        .config(&cfg)?;

    let outcome = adapt(&bb, &reference, &tags, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let emb_path = a.out.join(EMBEDDING_FILE);
    save_embedding(&emb_path, &outcome.auxiliaries, &cfg.hash())?;
    m.output(&emb_path);
    for (i, log) in outcome.logs.iter().enumerate() {
        let p = a.out.join(format!("trajectory_{i}.jsonl"));
        std::fs::write(&p, log.to_json_lines()?)?;
        m.output(&p);
    }
    m.write(&a.out.join(MANIFEST_FILE))?;

    let sem = select_semantic_layers(&bb.layer_catalog())?;
    let window = cfg.steps.min(50);
    let mean = |f: &dyn Fn(&seal_core::TrajectoryLog) -> Option<f64>| {
        let v: Vec<f64> = outcome.logs.iter().filter_map(f).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    println!(
        "{label}: K={} steps={} leakage(last {window}) {:.6} bind(last {window}) {:.6}",
        cfg.k,
        cfg.steps,
        mean(&|l| l.mean_leakage(&sem, window)),
        mean(&|l| l.mean_bind(&sem, window)),
    );
    Ok(())
}

fn apply_overrides(mut tags: TagRecord, overrides: &[String]) -> CliResult<TagRecord> {
    for o in overrides {
        let (attr, value) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected ATTR=VALUE, got {o:?}")))?;
        tags = attribute_edit(&tags, attr.parse::<Attribute>()?, value.trim())?.record;
    }
    Ok(tags)
}

fn generate(a: &GenerateArgs, argv: &[String]) -> CliResult<()> {
    let bb = load_checkpoint(&a.checkpoint)?;
    let v = load_merged(&a.embedding)?;
    let tags = apply_overrides(read_first_record(&a.tags)?, &a.set)?;
    let prompt = build_prompt(&tags, Some(PLACEHOLDER), bb.vocabulary())?;
    let c = bb.encode_text(&prompt, Some(&v))?;
    let image = bb.sample(&c, a.steps, a.guidance, a.seed)?;
    image.save_png(&a.out)?;

    let mut m = ManifestBuilder::new("generate", argv);
    m.seed("sample", a.seed)
        .input("checkpoint", &a.checkpoint)
        .input("embedding", &a.embedding)
        .input("tags", &a.tags)
        .config(serde_json::json!({
            "steps": a.steps,
            "guidance": a.guidance,
            "prompt": serialize_tag(&tags),
        }))?
        .output(&a.out);
    m.write(&sibling(&a.out, ".manifest.json"))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct AttentionMetrics<'a> {
    timesteps: &'a [usize],
    semantic_layers: &'a [usize],
    per_timestep: &'a [Vec<LayerDiagnostic>],
    layer_means: &'a [LayerDiagnostic],
    layer0_leakage: Option<f64>,
    semantic_mean_leakage: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.9}"))
}

fn inspect(a: &InspectArgs, argv: &[String]) -> CliResult<()> {
    if a.size == 0 {
        return Err(CliError::Usage("--size must be positive".into()));
    }
    let bb = load_checkpoint(&a.checkpoint)?;
    let v = load_merged(&a.embedding)?;
    let reference = load_reference(&a.reference, &a.mask)?;
    let tags = read_first_record(&a.tags)?;
    let report = leakage_report(&bb, &v, &reference, &tags, a.timesteps, a.seed)?;

    std::fs::create_dir_all(&a.out)?;
    let mut m = ManifestBuilder::new("inspect-attn", argv);
    m.seed("report", a.seed)
        .input("checkpoint", &a.checkpoint)
        .input("embedding", &a.embedding)
        .input("reference", &a.reference)
        .input("mask", &a.mask)
        .input("tags", &a.tags)
        .config(serde_json::json!({ "timesteps": a.timesteps, "size": a.size }))?;
    for (t, maps) in report.timesteps.iter().zip(&report.maps) {
        for map in maps {
            let p = a
                .out
                .join(format!("layer{}_t{t:04}.png", map.layer_index()));
            heatmap(map.height(), map.width(), map.grid(), a.size).save_png(&p)?;
            m.output(&p);
        }
    }
    let metrics = AttentionMetrics {
        timesteps: &report.timesteps,
        semantic_layers: &report.semantic_layers,
        per_timestep: &report.per_timestep,
        layer_means: &report.layer_means,
        layer0_leakage: report.layer0_leakage,
        semantic_mean_leakage: report.semantic_mean_leakage,
    };
    let metrics_path = a.out.join(METRICS_FILE);
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&metrics)?)?;
    m.output(&metrics_path);
    m.write(&a.out.join(MANIFEST_FILE))?;

    for d in &report.layer_means {
        println!(
            "layer {} leakage {} bind {}",
            d.layer,
            fmt_opt(d.leakage),
            fmt_opt(d.bind)
        );
    }
    println!(
        "layer0 leakage {} semantic mean leakage {}",
        fmt_opt(report.layer0_leakage),
        fmt_opt(report.semantic_mean_leakage)
    );
    Ok(())
}

fn domain_prefix(d: Option<Domain>) -> &'static str {
    match d {
        Some(Domain::Animation) => "animation, ",
        Some(Domain::Real) => "real, ",
        None => "",
    }
}

fn is_record_line(l: &str) -> bool {
    !l.trim().is_empty() && !l.trim_start().starts_with('#')
}

#[derive(Serialize)]
struct SimilarityReport {
    values: Vec<f64>,
    mean: f64,
    bin_edges: Vec<f64>,
    counts: Vec<usize>,
}

fn tags(cmd: &TagsCommand) -> CliResult<()> {
    match cmd {
        TagsCommand::Validate { file } => {
            let text = std::fs::read_to_string(file)?;
            let errors = validate_manifest(&text);
            for e in &errors {
                eprintln!("{}:{}: {}", file.display(), e.line, e.message);
            }
            if !errors.is_empty() {
                return Err(SealError::Tag(format!("{} malformed line(s)", errors.len())).into());
            }
            let n = text.lines().filter(|l| is_record_line(l)).count();
            println!("ok: {n} records");
            Ok(())
        }
        TagsCommand::Edit {
            file,
            attr,
            value,
            line,
            out,
        } => {
            let attribute: Attribute = attr.parse()?;
            let text = std::fs::read_to_string(file)?;
            let total = text.lines().count();
            if let Some(n) = *line {
                if n == 0 || n > total {
                    return Err(CliError::Usage(format!("--line {n} outside 1..={total}")));
                }
            }
            let mut output = String::new();
            for (i, l) in text.lines().enumerate() {
                let target = line.is_none_or(|n| n == i + 1);
                if target && is_record_line(l) {
                    let (domain, record) = parse_tag_line_auto(l)
                        .map_err(|e| SealError::Tag(format!("line {}: {e}", i + 1)))?;
                    let edited = attribute_edit(&record, attribute, value)?;
                    if let Some(w) = edited.warning {
                        eprintln!("warning: line {}: {w}", i + 1);
                    }
                    output.push_str(domain_prefix(domain));
                    output.push_str(&serialize_tag(&edited.record));
                } else {
                    output.push_str(l);
                }
                output.push('\n');
            }
            match out {
                Some(p) => std::fs::write(p, output)?,
                None => print!("{output}"),
            }
            Ok(())
        }
        TagsCommand::Similarity { file, bins, out } => {
            if *bins == 0 {
                return Err(CliError::Usage("--bins must be positive".into()));
            }
            let records = parse_manifest(&std::fs::read_to_string(file)?)?;
            if records.is_empty() {
                return Err(SealError::Tag("no records".into()).into());
            }
            let embedder = TrigramEmbedder::default();
            let values = records
                .iter()
                .map(|r| intra_similarity(r, &embedder))
                .collect::<seal_core::Result<Vec<_>>>()?;
            let mut counts = vec![0usize; *bins];
            for &v in &values {
                let b = ((v.clamp(0.0, 1.0) * *bins as f64) as usize).min(bins - 1);
                counts[b] += 1;
            }
            let report = SimilarityReport {
                mean: values.iter().sum::<f64>() / values.len() as f64,
                bin_edges: (0..=*bins).map(|i| i as f64 / *bins as f64).collect(),
                values,
                counts,
            };
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
            Ok(())
        }
    }
}
