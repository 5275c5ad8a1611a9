use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use allsky::anchors::{kmeans_box_priors, DEFAULT_K, DEFAULT_RESTARTS};
use allsky::index_store::build_index;
use allsky::pipeline::{DEFAULT_L, DEFAULT_SEED};
use allsky::proposals::{DEFAULT_NMS_IOU, DEFAULT_TOP_N};
use allsky::search::{ablation_grid, evaluate_index, rank_with_mode, FeatureMode};
use allsky::synth::{generate_dataset_with, load_corpus, SynthParams, BENCHMARK_CLASSES, BENCHMARK_PER_CLASS, BENCHMARK_SEED};
use allsky::text::{format_box_table, parse_box_table, parse_manifest, parse_priors, parse_relevance};
use allsky::{AnchorMode, BoxPrior, CameraModel, GrayImage, Index, IndexConfig, LabeledBox};

#[derive(Parser)]
#[command(name = "allsky", version, about = "Saliency proposals and content-based retrieval for all-sky images")]
struct Cli {
    /// Output format for tables.
    #[arg(long, value_enum, global = true, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Tsv,
}

#[derive(Args, Clone)]
struct CameraArgs {
    /// Side of the square image in pixels.
    #[arg(long, default_value_t = 512)]
    image_size: u32,
    /// Disk center x; defaults to the image center.
    #[arg(long)]
    cx: Option<f64>,
    /// Disk center y; defaults to the image center.
    #[arg(long)]
    cy: Option<f64>,
    /// Horizon radius in pixels.
    #[arg(long, default_value_t = 240.0)]
    rim_radius: f64,
    /// Magnetic meridian angle in the image, radians.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    phi: f64,
}

impl CameraArgs {
    fn camera(&self) -> Result<CameraModel> {
        let half = f64::from(self.image_size) / 2.0;
        Ok(CameraModel::new(
            self.cx.unwrap_or(half),
            self.cy.unwrap_or(half),
            self.rim_radius,
            self.phi,
            self.image_size,
        )?)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AnchorArg {
    /// Rectangular grid, horizontal boxes.
    RaHd,
    /// Circular anchors, horizontal boxes.
    CaHd,
    /// Circular anchors along the deformation direction.
    CaDd,
}

impl From<AnchorArg> for AnchorMode {
    fn from(a: AnchorArg) -> Self {
        match a {
            AnchorArg::RaHd => AnchorMode::RectangularHorizontal,
            AnchorArg::CaHd => AnchorMode::CircularHorizontal,
            AnchorArg::CaDd => AnchorMode::CircularDeformation,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Combined,
    AllRegional,
    AllGlobal,
}

impl From<ModeArg> for FeatureMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Combined => FeatureMode::Combined,
            ModeArg::AllRegional => FeatureMode::AllRegional,
            ModeArg::AllGlobal => FeatureMode::AllGlobal,
        }
    }
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// Lattice size; l² anchors.
    #[arg(long, default_value_t = DEFAULT_L)]
    l: u32,
    /// Regions kept per image.
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    top_n: usize,
    /// NMS suppression threshold.
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms_iou: f64,
    /// Backbone projection seed.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AnchorArg::CaDd)]
    anchor_mode: AnchorArg,
}

impl PipelineArgs {
    fn config(&self, camera: CameraModel, priors: Vec<BoxPrior>) -> Result<IndexConfig> {
        let cfg = IndexConfig {
            camera,
            l: self.l,
            priors,
            top_n: self.top_n,
            nms_iou: self.nms_iou,
            seed: self.seed,
            anchor_mode: self.anchor_mode.into(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus: images, manifest, relevance and label files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = BENCHMARK_CLASSES)]
        classes: u32,
        #[arg(long, default_value_t = BENCHMARK_PER_CLASS)]
        per_class: u32,
        #[arg(long, default_value_t = BENCHMARK_SEED)]
        seed: u64,
        #[arg(long)]
        noise: Option<f64>,
        #[command(flatten)]
        camera: CameraArgs,
    },
    /// Cluster labeled box shapes into priors and report average IoU against K.
    Priors {
        /// Manifest whose ground-truth boxes are clustered.
        #[arg(long, conflicts_with = "labels", required_unless_present = "labels")]
        manifest: Option<PathBuf>,
        /// Plain `w h` table to cluster instead.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        /// Largest K in the average-IoU table.
        #[arg(long, default_value_t = 8)]
        max_k: usize,
        #[arg(long, default_value_t = DEFAULT_RESTARTS)]
        restarts: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Where to write the K priors.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract features for every manifest image and save the index.
    Index {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        camera: CameraArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Rank an index against one query image.
    Query {
        #[arg(long)]
        index: PathBuf,
        /// The priors the index was built with.
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Rows to print.
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Anchor mode the index was built with.
        #[arg(long, value_enum, default_value_t = AnchorArg::CaDd)]
        anchor_mode: AnchorArg,
        #[arg(long, value_enum, default_value_t = ModeArg::Combined)]
        mode: ModeArg,
    },
    /// Mean average precision of an index over a relevance file.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        relevance: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Combined)]
        mode: ModeArg,
    },
    /// mAP grid over anchor modes and feature modes.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        relevance: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        #[command(flatten)]
        camera: CameraArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// List the circular anchor lattice.
    Anchors {
        #[arg(long, default_value_t = DEFAULT_L)]
        l: u32,
        #[command(flatten)]
        camera: CameraArgs,
    },
}

/// Column-aligned or tab-separated table writer.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn render(&self, format: Format) -> String {
        let mut out = String::new();
        match format {
            Format::Tsv => {
                for row in std::iter::once(&self.header).chain(&self.rows) {
                    out.push_str(&row.join("\t"));
                    out.push('\n');
                }
            }
            Format::Text => {
                let widths: Vec<usize> = (0..self.header.len())
                    .map(|c| {
                        std::iter::once(&self.header)
                            .chain(&self.rows)
                            .map(|r| r[c].len())
                            .max()
                            .unwrap_or(0)
                    })
                    .collect();
                for row in std::iter::once(&self.header).chain(&self.rows) {
                    let cells: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
                    out.push_str(cells.join("  ").trim_end());
                    out.push('\n');
                }
            }
        }
        out
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_priors(path: &Path) -> Result<Vec<BoxPrior>> {
    let priors = parse_priors(&read_text(path)?, &path.display().to_string())?;
    if priors.is_empty() {
        bail!("{} lists no priors", path.display());
    }
    Ok(priors)
}

fn run(cli: Cli) -> Result<()> {
    let format = cli.format;
    match cli.command {
        Command::Synth {
            out,
            classes,
            per_class,
            seed,
            noise,
            camera,
        } => {
            let cam = camera.camera()?;
            let mut params = SynthParams::default();
            if let Some(n) = noise {
                params.noise_sigma = n;
            }
            let data = generate_dataset_with(classes, per_class, &cam, seed, &params)?;
            data.write_to(&out)?;
            println!("wrote {} images to {}", data.items.len(), out.display());
        }
        Command::Priors {
            manifest,
            labels,
            k,
            max_k,
            restarts,
            seed,
            out,
        } => {
            let boxes: Vec<LabeledBox> = match (manifest, labels) {
                (Some(m), _) => parse_manifest(&read_text(&m)?, &m.display().to_string())?
                    .iter()
                    .flat_map(|r| r.boxes.iter().map(|b| LabeledBox { w: b.w, h: b.h }))
                    .collect(),
                (None, Some(l)) => parse_box_table(&read_text(&l)?, &l.display().to_string())?,
                (None, None) => bail!("either --manifest or --labels is required"),
            };
            let mut table = Table::new(&["k", "avg_iou"]);
            for kk in 1..=max_k.max(k).min(boxes.len()) {
                let res = kmeans_box_priors(&boxes, kk, seed, restarts)?;
                table.push(vec![kk.to_string(), format!("{:.6}", res.avg_iou)]);
            }
            let chosen = kmeans_box_priors(&boxes, k, seed, restarts)?;
            print!("{}", table.render(format));
            let mut priors = Table::new(&["prior", "w", "h"]);
            for (i, p) in chosen.priors.iter().enumerate() {
                priors.push(vec![i.to_string(), format!("{:.3}", p.w), format!("{:.3}", p.h)]);
            }
            print!("{}", priors.render(format));
            if let Some(path) = out {
                fs::write(&path, format_box_table(chosen.priors.iter().map(|p| (p.w, p.h))))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Index {
            manifest,
            priors,
            out,
            camera,
            pipeline,
        } => {
            let cfg = pipeline.config(camera.camera()?, load_priors(&priors)?)?;
            let (_, images) = load_corpus(&manifest)?;
            let index = build_index(&images, &cfg)?;
            index.save_file(&out)?;
            println!("indexed {} images into {}", index.len(), out.display());
        }
        Command::Query {
            index,
            priors,
            image,
            top,
            anchor_mode,
            mode,
        } => {
            let idx = Index::load_file(&index)?;
            let params = *idx.params();
            let priors = load_priors(&priors)?;
            if priors.len() != params.k as usize {
                bail!("index was built with {} priors, {} given", params.k, priors.len());
            }
            let cfg = IndexConfig {
                camera: params.camera,
                l: params.l,
                priors,
                top_n: params.top_n as usize,
                nms_iou: params.nms_iou,
                seed: params.seed,
                anchor_mode: anchor_mode.into(),
            };
            let img = GrayImage::load_pgm(&image)?;
            let features = cfg.extract(&img)?;
            let ranking = rank_with_mode(&features, &cfg.params(), &idx, &FeatureMode::from(mode).score_mode())?;
            let mut table = Table::new(&["rank", "image_id", "ss_g", "ss_r", "ss"]);
            for (i, r) in ranking.iter().take(top).enumerate() {
                table.push(vec![
                    (i + 1).to_string(),
                    r.image_id.clone(),
                    format!("{:.6}", r.ss_g),
                    format!("{:.6}", r.ss_r),
                    format!("{:.6}", r.ss),
                ]);
            }
            print!("{}", table.render(format));
        }
        Command::Eval { index, relevance, mode } => {
            let idx = Index::load_file(&index)?;
            let rel = parse_relevance(&read_text(&relevance)?, &relevance.display().to_string())?;
            let map = evaluate_index(&idx, &rel, &FeatureMode::from(mode).score_mode())?;
            let mut table = Table::new(&["queries", "mAP"]);
            table.push(vec![rel.len().to_string(), format!("{map:.12}")]);
            print!("{}", table.render(format));
        }
        Command::Ablate {
            manifest,
            relevance,
            priors,
            camera,
            pipeline,
        } => {
            let cfg = pipeline.config(camera.camera()?, load_priors(&priors)?)?;
            let (_, images) = load_corpus(&manifest)?;
            let rel = parse_relevance(&read_text(&relevance)?, &relevance.display().to_string())?;
            let rows = ablation_grid(&images, &rel, &cfg, &AnchorMode::ALL, &FeatureMode::TABLE)?;
            let labels: Vec<String> = FeatureMode::TABLE.iter().map(|m| m.label()).collect();
            let mut header = vec!["anchors"];
            header.extend(labels.iter().map(String::as_str));
            let mut table = Table::new(&header);
            for mode in AnchorMode::ALL {
                let mut row = vec![mode.label().to_string()];
                row.extend(rows.iter().filter(|r| r.anchor_mode == mode).map(|r| format!("{:.4}", r.map)));
                table.push(row);
            }
            print!("{}", table.render(format));
        }
        Command::Anchors { l, camera } => {
            let cam = camera.camera()?;
            let mut table = Table::new(&["lat", "lon", "x", "y", "direction"]);
            for a in allsky::anchor_lattice(&cam, l)? {
                table.push(vec![
                    a.lat_index.to_string(),
                    a.lon_index.to_string(),
                    format!("{:.6}", a.point.x),
                    format!("{:.6}", a.point.y),
                    format!("{:.6}", a.direction),
                ]);
            }
            print!("{}", table.render(format));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
