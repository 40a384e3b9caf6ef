use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use seal_core::adapter::{leakage_report, load_embedding, Reference};
use seal_core::backbone::load_checkpoint;
use seal_core::imaging::{GrayGrid, RgbImage};
use seal_core::tagkit::parse_tag_line_auto;
use seal_core::Backbone;
use tempfile::TempDir;

const TAG_LINE: &str = "red circle, happy, standing, centered, flat vector, plain";

fn seal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small corpus, a briefly pretrained checkpoint and one adapted embedding,
/// shared by every test in this file.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    fn ckpt(&self) -> PathBuf {
        self.root.join("bb.ckpt")
    }
    fn image(&self) -> PathBuf {
        self.corpus().join("images/00000.png")
    }
    fn mask(&self) -> PathBuf {
        self.corpus().join("masks/00000.png")
    }
    fn tags(&self) -> PathBuf {
        self.root.join("tags.txt")
    }
    fn embedding(&self) -> PathBuf {
        self.root.join("adapted/embedding.seal")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        assert!(seal(&[
            "corpus",
            "--n",
            "12",
            "--seed",
            "3",
            "--out",
            s(&f.corpus())
        ])
        .status
        .success());
        assert!(seal(&[
            "pretrain",
            "--corpus",
            s(&f.corpus()),
            "--steps",
            "30",
            "--out",
            s(&f.ckpt())
        ])
        .status
        .success());
        std::fs::write(f.tags(), format!("{TAG_LINE}\n")).unwrap();
        let out = f.root.join("adapted");
        let o = seal(&[
            "adapt",
            "--checkpoint",
            s(&f.ckpt()),
            "--reference",
            s(&f.image()),
            "--mask",
            s(&f.mask()),
            "--tags",
            s(&f.tags()),
            "--k",
            "2",
            "--steps",
            "6",
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        f
    })
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(
            seal(&["corpus", "--n", "5", "--seed", "9", "--out", s(d)])
                .status
                .code(),
            Some(0)
        );
    }
    let fa = files_under(&a);
    assert_eq!(
        fa.iter()
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .count(),
        10
    );
    for p in fa.iter().filter(|p| !p.ends_with("manifest.json")) {
        let q = b.join(p.strip_prefix(&a).unwrap());
        assert_eq!(
            std::fs::read(p).unwrap(),
            std::fs::read(q).unwrap(),
            "{}",
            p.display()
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "corpus");
    assert_eq!(manifest["seeds"]["corpus"], 9);

    assert_eq!(
        seal(&["corpus", "--n", "0", "--out", s(&a)]).status.code(),
        Some(1)
    );
}

#[test]
fn pretrain_zero_steps_keeps_initialization() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("init.ckpt");
    let o = seal(&[
        "pretrain",
        "--corpus",
        s(&f.corpus()),
        "--steps",
        "0",
        "--arch-seed",
        "4",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let loaded = load_checkpoint(&out).unwrap();
    let init = Backbone::build(4);
    for (a, b) in loaded.param_values().iter().zip(init.param_values()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    let csv = std::fs::read_to_string(dir.path().join("init.loss.csv")).unwrap();
    assert_eq!(csv.trim(), "step,loss");

    let missing = seal(&[
        "pretrain",
        "--corpus",
        "/nonexistent/corpus",
        "--out",
        s(&out),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn adapt_writes_artifacts_and_labels_control() {
    let f = fixture();
    let adapted = f.root.join("adapted");
    assert!(adapted.join("trajectory_0.jsonl").is_file());
    assert!(adapted.join("trajectory_1.jsonl").is_file());
    let (set, header) = load_embedding(&f.embedding(), None).unwrap();
    assert_eq!((set.k(), header.k), (2, 2));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(adapted.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["label"], "seal");

    let dir = tempfile::tempdir().unwrap();
    let o = seal(&[
        "adapt",
        "--checkpoint",
        s(&f.ckpt()),
        "--reference",
        s(&f.image()),
        "--mask",
        s(&f.mask()),
        "--tags",
        s(&f.tags()),
        "--lambda-spatial",
        "0",
        "--k",
        "1",
        "--steps",
        "3",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["label"], "control");
    let log = std::fs::read_to_string(dir.path().join("trajectory_0.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn adapt_rejects_empty_mask() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mask = dir.path().join("empty.png");
    GrayGrid::constant(32, 32, 0.0).save_png(&mask).unwrap();
    let o = seal(&[
        "adapt",
        "--checkpoint",
        s(&f.ckpt()),
        "--reference",
        s(&f.image()),
        "--mask",
        s(&mask),
        "--tags",
        s(&f.tags()),
        "--steps",
        "2",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty mask after resize"));
}

#[test]
fn adapt_rejects_bad_flags() {
    let f = fixture();
    let o = seal(&[
        "adapt",
        "--checkpoint",
        s(&f.ckpt()),
        "--reference",
        s(&f.image()),
        "--mask",
        s(&f.mask()),
        "--tags",
        s(&f.tags()),
        "--steps",
        "many",
        "--out",
        "/tmp/unused",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn generate_is_seeded_and_follows_tag_edits() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, emb, tags) = (f.ckpt(), f.embedding(), f.tags());
    let run = |name: &str, seed: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec![
            "generate",
            "--checkpoint",
            s(&ckpt),
            "--embedding",
            s(&emb),
            "--tags",
            s(&tags),
            "--steps",
            "10",
            "--seed",
            seed,
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        let o = seal(&args);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        std::fs::read(&out).unwrap()
    };
    let a = run("a.png", "1", &[]);
    let b = run("b.png", "1", &[]);
    assert_eq!(a, b);
    let striped = run("c.png", "1", &["--set", "background=stripes"]);
    assert_ne!(a, striped);
    assert_eq!(
        RgbImage::load_png(&dir.path().join("a.png")).unwrap().width,
        32
    );
}

fn parse_stdout_layers(stdout: &str) -> Vec<(usize, f64)> {
    stdout
        .lines()
        .filter(|l| l.starts_with("layer ") && l.contains(" leakage "))
        .map(|l| {
            let w: Vec<&str> = l.split_whitespace().collect();
            (w[1].parse().unwrap(), w[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn inspect_attn_outputs_agree() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = seal(&[
        "inspect-attn",
        "--checkpoint",
        s(&f.ckpt()),
        "--embedding",
        s(&f.embedding()),
        "--reference",
        s(&f.image()),
        "--mask",
        s(&f.mask()),
        "--tags",
        s(&f.tags()),
        "--timesteps",
        "3",
        "--seed",
        "5",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let pngs: Vec<_> = files_under(dir.path())
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    assert_eq!(pngs.len(), 6 * 3);
    let heat = GrayGrid::load_png(&pngs[0]).unwrap();
    assert_eq!((heat.height, heat.width), (128, 128));

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap())
            .unwrap();
    let printed = parse_stdout_layers(&String::from_utf8_lossy(&o.stdout));
    assert_eq!(printed.len(), 6);

    // Library route on the same inputs.
    let bb = load_checkpoint(&f.ckpt()).unwrap();
    let (set, _) = load_embedding(&f.embedding(), None).unwrap();
    let reference = Reference {
        image: RgbImage::load_png(&f.image()).unwrap(),
        mask: GrayGrid::load_png(&f.mask()).unwrap(),
    };
    let tags = parse_tag_line_auto(TAG_LINE).unwrap().1;
    let rep = leakage_report(&bb, set.merged().unwrap(), &reference, &tags, 3, 5).unwrap();

    for (j, (layer, value)) in printed.iter().enumerate() {
        let json = metrics["layer_means"][j]["leakage"].as_f64().unwrap();
        assert_eq!(
            metrics["layer_means"][j]["layer"].as_u64().unwrap() as usize,
            *layer
        );
        assert!((json - value).abs() < 1e-6);
        assert!((json - rep.layer_means[j].leakage.unwrap()).abs() < 1e-6);
    }

    let missing = seal(&[
        "inspect-attn",
        "--checkpoint",
        s(&f.ckpt()),
        "--embedding",
        "/nonexistent.seal",
        "--reference",
        s(&f.image()),
        "--mask",
        s(&f.mask()),
        "--tags",
        s(&f.tags()),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn tag_commands() {
    let f = fixture();
    assert_eq!(
        seal(&["tags", "validate", s(&f.corpus().join("tags.txt"))])
            .status
            .code(),
        Some(0)
    );

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.txt");
    std::fs::write(&src, format!("animation, {TAG_LINE}\n# note\n{TAG_LINE}\n")).unwrap();
    let out = dir.path().join("out.txt");
    let o = seal(&[
        "tags",
        "edit",
        s(&src),
        "--attr",
        "background",
        "--value",
        "cloudy sky",
        "--line",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let edited = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = edited.lines().collect();
    assert_eq!(
        lines[0],
        "animation, red circle, happy, standing, centered, flat vector, cloudy sky"
    );
    assert_eq!(lines[1], "# note");
    assert_eq!(lines[2], TAG_LINE);

    let bad = dir.path().join("bad.txt");
    std::fs::write(
        &bad,
        format!("{TAG_LINE}\nanimation, a, b, c, d, e, f, g\nonly, three, fields\n"),
    )
    .unwrap();
    let o = seal(&["tags", "validate", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(":2:") && err.contains(":3:"), "{err}");

    let o = seal(&["tags", "similarity", s(&src), "--bins", "5"]);
    assert_eq!(o.status.code(), Some(0));
    let rep: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["values"].as_array().unwrap().len(), 2);
    assert_eq!(
        rep["counts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c.as_u64().unwrap())
            .sum::<u64>(),
        2
    );
}
