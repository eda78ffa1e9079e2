//! Directory-level dataset conversion: annotation files plus PGM images in,
//! one JSONL of uniform instruction records out.
//!
//! Iteration order is lexicographic by image id and every record is fully
//! determined by its inputs, so reruns produce byte-identical output files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use shipdet_core::codec::Task;
use shipdet_core::labeling::{
    convert_record, parse_dota_annotation, parse_hbb_json_annotation, ClassFilter,
    ConversionStats, Modality, SourceAnnotation,
};
use shipdet_core::raster::pgm_dimensions;

/// Supported annotation formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceFormat {
    /// One text file per image: `x1 y1 x2 y2 x3 y3 x4 y4 class difficulty`
    /// per line, optional `imagesource:`/`gsd:` headers.
    Dota,
    /// One JSON file per image: `{"objects": [{"bbox": [x, y, w, h]}, ...]}`.
    HbbJson,
}

impl SourceFormat {
    fn extension(&self) -> &'static str {
        match self {
            SourceFormat::Dota => "txt",
            SourceFormat::HbbJson => "json",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvertOptions {
    pub format: SourceFormat,
    pub task: Task,
    pub images_dir: PathBuf,
    pub annotations_dir: PathBuf,
    pub out_path: PathBuf,
    pub source_dataset: String,
    pub modality: Modality,
    /// Keep images with zero ships (explicit empty answer). Default true.
    pub keep_empty: bool,
    /// Fail hard when an annotation file has malformed lines and no valid
    /// objects at all.
    pub strict: bool,
    pub class_filter: ClassFilter,
}

/// Converts a dataset directory. Returns stats; honors the conservation
/// rule `records_emitted = annotation files - images_skipped`.
pub fn convert_dataset(opts: &ConvertOptions) -> Result<ConversionStats> {
    let mut stats = ConversionStats::default();

    let mut stems: Vec<String> = Vec::new();
    let entries = fs::read_dir(&opts.annotations_dir)
        .with_context(|| format!("reading {}", opts.annotations_dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(opts.format.extension()) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    if stems.is_empty() {
        bail!(
            "no .{} annotation files in {}",
            opts.format.extension(),
            opts.annotations_dir.display()
        );
    }
    stems.sort();

    if let Some(parent) = opts.out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut out = fs::File::create(&opts.out_path)
        .with_context(|| format!("creating {}", opts.out_path.display()))?;

    // record image paths are stored relative to the output file, so a
    // records file can be consumed from anywhere
    let out_dir = opts
        .out_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));

    for stem in &stems {
        let ann_path = opts
            .annotations_dir
            .join(format!("{stem}.{}", opts.format.extension()));
        let image_name = format!("{stem}.pgm");
        let image_path = opts.images_dir.join(&image_name);

        let image_bytes = match fs::read(&image_path) {
            Ok(b) => b,
            Err(_) => {
                stats.images_skipped += 1;
                stats.count("missing_image");
                continue;
            }
        };
        let image_size = match pgm_dimensions(&image_bytes) {
            Ok(dims) => dims,
            Err(_) => {
                stats.images_skipped += 1;
                stats.count("unreadable_image");
                continue;
            }
        };

        let text = match fs::read_to_string(&ann_path) {
            Ok(t) => t,
            Err(_) => {
                stats.images_skipped += 1;
                stats.count("unreadable_annotation");
                continue;
            }
        };

        let (parsed, declared_dims) = match opts.format {
            SourceFormat::Dota => (parse_dota_annotation(&text, &opts.class_filter), None),
            SourceFormat::HbbJson => match parse_hbb_json_annotation(&text, &opts.class_filter) {
                Ok((p, dims)) => (p, dims),
                Err(_) => {
                    stats.images_skipped += 1;
                    stats.count("malformed_annotation");
                    continue;
                }
            },
        };
        if let Some(declared) = declared_dims {
            if declared != image_size {
                stats.images_skipped += 1;
                stats.count("size_mismatch");
                continue;
            }
        }

        if !parsed.malformed.is_empty() {
            for _ in &parsed.malformed {
                stats.count("malformed_line");
            }
            if opts.strict && parsed.objects.is_empty() {
                bail!(
                    "{}:{}: {} (strict mode)",
                    ann_path.display(),
                    parsed.malformed[0].line_no,
                    parsed.malformed[0].message
                );
            }
        }
        for _ in 0..parsed.class_filtered {
            stats.count("non_ship_class");
        }

        let ann = SourceAnnotation {
            image_id: stem.clone(),
            image_size,
            objects: parsed.objects,
            modality: opts.modality,
            source_dataset: opts.source_dataset.clone(),
        };
        let record_image = relativize(&image_path, &out_dir);
        let built = convert_record(&ann, opts.task, &record_image)?;
        stats.objects_dropped += built.objects_dropped;
        for reason in &built.drop_reasons {
            stats.count(reason);
        }
        if built.boxes_kept == 0 && !opts.keep_empty {
            stats.images_skipped += 1;
            stats.count("empty_image_dropped");
            continue;
        }
        let line = serde_json::to_string(&built.record)?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        stats.records_emitted += 1;
    }

    Ok(stats)
}

/// Loads instruction records back from a conversion output (or any records
/// file), with line-numbered errors.
pub fn load_records(path: &Path) -> Result<Vec<shipdet_core::labeling::InstructionRecord>> {
    crate::jsonl::read_lines(path)
}

// Path of `target` relative to `base_dir`, joined with '/' so record files
// are byte-identical across platforms. Falls back to the absolute path when
// the two share no usable prefix.
fn relativize(target: &Path, base_dir: &Path) -> String {
    let (canon_target, canon_base) = match (target.canonicalize(), base_dir.canonicalize()) {
        (Ok(t), Ok(b)) => (t, b),
        _ => return target.display().to_string(),
    };
    let t: Vec<_> = canon_target.components().collect();
    let b: Vec<_> = canon_base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut parts: Vec<String> = Vec::new();
    for _ in common..b.len() {
        parts.push(String::from(".."));
    }
    for comp in &t[common..] {
        parts.push(comp.as_os_str().to_string_lossy().into_owned());
    }
    if parts.is_empty() {
        target.display().to_string()
    } else {
        parts.join("/")
    }
}
