//! One function per verb. Each reads its inputs from explicit paths and
//! writes under `out`, so `pipeline` can chain them inside one run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use lvseg::eval::{emit_report, EvalReport, PatientRow};
use lvseg::imgproc::{preprocess as prep_image, preprocess_mask, Method};
use lvseg::ingest::{
    load_masks, load_study, parse_contour_text, parse_dicom, parse_nifti, rasterize_contour,
    simplify_acdc_label, store_study, ImageMeta, ImageStack, MaskGrid, SliceSeries,
};
use lvseg::postproc::filter_patient;
use lvseg::roi::{apply_roi, detect_roi, RoiError, RoiRect};
use lvseg::unet::{
    binarize, build_model, load_weights, save_weights, split_patients, train_with,
    write_history_csv, Sample,
};
use lvseg::volume::{
    combine_phases, ensemble_average, ensemble_majority, patient_volumes, slice_location,
    volumes_with_fallback, EnsembleMode, SliceMasks,
};
use lvseg::{Image, Mask};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{list_bundles, Bundle, Header, SliceGeom};
use crate::config::Config;
use crate::{DataError, Invalid};

fn pool(cfg: &Config) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()?)
}

/// Runs `f` on every item in the worker pool; results keep the input order.
fn par_map<T: Sync, R: Send>(
    cfg: &Config,
    items: &[T],
    f: impl Fn(&T) -> anyhow::Result<R> + Sync,
) -> anyhow::Result<Vec<R>> {
    pool(cfg)?.install(|| items.par_iter().map(&f).collect())
}

fn subdirs(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn name_of(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Clone, Debug)]
pub enum Source {
    /// One subdirectory of DICOM files per patient.
    Dicom(PathBuf),
    /// `<patient>.nii` files with optional label volumes next to them.
    Nifti(PathBuf),
}

/// Converts raw studies into canonical study directories under `out`.
pub fn ingest(cfg: &Config, source: &Source, out: &Path) -> anyhow::Result<Vec<String>> {
    let jobs: Vec<(String, PathBuf)> = match source {
        Source::Dicom(root) => subdirs(root)?
            .into_iter()
            .map(|d| (name_of(&d), d))
            .collect(),
        Source::Nifti(root) => {
            let suffix = format!("{}.nii", cfg.ingest.label_suffix);
            let mut files: Vec<PathBuf> = fs::read_dir(root)
                .with_context(|| format!("listing {}", root.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let n = name_of(p);
                    n.ends_with(".nii") && !n.ends_with(&suffix)
                })
                .collect();
            files.sort();
            files
                .into_iter()
                .map(|f| (name_of(&f).trim_end_matches(".nii").to_owned(), f))
                .collect()
        }
    };
    if jobs.is_empty() {
        return Err(DataError(format!("no patients found in {source:?}")).into());
    }
    par_map(cfg, &jobs, |(id, path)| {
        let (stack, masks) = match source {
            Source::Dicom(_) => read_dicom_patient(id, path),
            Source::Nifti(_) => read_nifti_patient(cfg, id, path),
        }
        .with_context(|| format!("patient {id}"))?;
        store_study(&stack, masks.as_ref(), &out.join(id))?;
        eprintln!(
            "ingest: {id}: {} slices x {} frames",
            stack.num_slices(),
            stack.num_frames()
        );
        Ok(id.clone())
    })
}

fn read_dicom_patient(id: &str, dir: &Path) -> anyhow::Result<(ImageStack, Option<MaskGrid>)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().map_or(true, |e| e != "txt"))
        .collect();
    files.sort();
    // Key: (slice location in µm, acquisition index).
    let mut groups: BTreeMap<(i64, u32), Vec<(ImageMeta, Image<u16>, Option<Mask>)>> =
        BTreeMap::new();
    let mut any_mask = false;
    for f in &files {
        let bytes = fs::read(f)?;
        let (meta, px) = parse_dicom(&bytes).with_context(|| format!("{}", f.display()))?;
        let contour = f.with_extension("txt");
        let mask = if contour.is_file() {
            any_mask = true;
            let pts = parse_contour_text(&fs::read_to_string(&contour)?)
                .with_context(|| format!("{}", contour.display()))?;
            Some(rasterize_contour(&pts, meta.rows, meta.cols)?)
        } else {
            None
        };
        let loc = slice_location(&meta.ipp, &meta.iop)?;
        groups
            .entry(((loc * 1000.0).round() as i64, meta.acquisition_index))
            .or_default()
            .push((meta, px, mask));
    }
    if groups.is_empty() {
        return Err(DataError(format!("no DICOM files in {}", dir.display())).into());
    }
    let mut slices = Vec::new();
    let mut grid = Vec::new();
    for frames in groups.into_values() {
        let mut series = SliceSeries {
            frames: vec![],
            meta: vec![],
        };
        let mut row = Vec::new();
        for (meta, px, mask) in frames {
            series.frames.push(px);
            series.meta.push(meta);
            row.push(mask);
        }
        slices.push(series);
        grid.push(row);
    }
    Ok((ImageStack::new(id, slices)?, any_mask.then_some(grid)))
}

fn read_nifti_patient(
    cfg: &Config,
    id: &str,
    path: &Path,
) -> anyhow::Result<(ImageStack, Option<MaskGrid>)> {
    let vol = parse_nifti(&fs::read(path)?).with_context(|| format!("{}", path.display()))?;
    let stack = vol.to_stack(id)?;
    let label_path = path.with_file_name(format!("{id}{}.nii", cfg.ingest.label_suffix));
    let masks = if label_path.is_file() {
        let labels = parse_nifti(&fs::read(&label_path)?)
            .with_context(|| format!("{}", label_path.display()))?;
        if (labels.slices, labels.frames, labels.rows, labels.cols)
            != (vol.slices, vol.frames, vol.rows, vol.cols)
        {
            return Err(DataError(format!(
                "{} does not match the image volume shape",
                label_path.display()
            ))
            .into());
        }
        let lv = cfg.ingest.lv_class as f32;
        Some(
            (0..vol.slices)
                .map(|s| {
                    (0..vol.frames)
                        .map(|f| Some(simplify_acdc_label(&labels.frame(s, f), lv)))
                        .collect()
                })
                .collect(),
        )
    } else {
        None
    };
    Ok((stack, masks))
}

fn study_frames(stack: &ImageStack) -> Vec<Vec<Image<u16>>> {
    stack.slices.iter().map(|s| s.frames.clone()).collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RoiReport {
    pub patient_id: String,
    pub rect: Option<RoiRect>,
    pub circles: usize,
}

/// Detects the LV region for every study and writes `<patient>.json`.
pub fn roi(cfg: &Config, studies: &Path, out: &Path) -> anyhow::Result<Vec<RoiReport>> {
    fs::create_dir_all(out)?;
    let dirs = subdirs(studies)?;
    par_map(cfg, &dirs, |dir| {
        let stack = load_study(dir)?;
        let report = match detect_roi(&study_frames(&stack), &cfg.roi.params) {
            Ok(d) => RoiReport {
                patient_id: stack.patient_id.clone(),
                rect: Some(d.rect),
                circles: d.circles.len(),
            },
            Err(RoiError::RoiNotFound) => {
                eprintln!("roi: {}: no region found", stack.patient_id);
                RoiReport {
                    patient_id: stack.patient_id.clone(),
                    rect: None,
                    circles: 0,
                }
            }
            Err(e) => return Err(e.into()),
        };
        fs::write(
            out.join(format!("{}.json", stack.patient_id)),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        Ok(report)
    })
}

fn crop_meta(meta: &ImageMeta, rect: &RoiRect) -> ImageMeta {
    let mut m = meta.clone();
    let (dr, dc) = (
        rect.row_min as f64 * m.pixel_spacing_row,
        rect.col_min as f64 * m.pixel_spacing_col,
    );
    for k in 0..3 {
        m.ipp[k] += dc * m.iop[k] + dr * m.iop[3 + k];
    }
    m.rows = rect.height();
    m.cols = rect.width();
    m
}

/// Orientation, resampling, cropping and intensity steps for every study,
/// optionally after cropping to the detected ROI.
pub fn preprocess(cfg: &Config, studies: &Path, out: &Path) -> anyhow::Result<Vec<String>> {
    let dirs = subdirs(studies)?;
    let recipe = &cfg.preprocess;
    par_map(cfg, &dirs, |dir| {
        let mut stack = load_study(dir)?;
        let mut masks = load_masks(dir)?;
        let id = stack.patient_id.clone();
        if cfg.roi.crop {
            match detect_roi(&study_frames(&stack), &cfg.roi.params) {
                Ok(d) => {
                    for slice in &mut stack.slices {
                        for (frame, meta) in slice.frames.iter_mut().zip(&mut slice.meta) {
                            *frame = apply_roi(frame, &d.rect)?;
                            *meta = crop_meta(meta, &d.rect);
                        }
                    }
                    for m in masks.iter_mut().flatten().flatten().flatten() {
                        *m = apply_roi(m, &d.rect)?;
                    }
                }
                Err(RoiError::RoiNotFound) => {
                    eprintln!("preprocess: {id}: no ROI found, using the full image")
                }
                Err(e) => return Err(e.into()),
            }
        }
        let mut images = Vec::new();
        let mut geoms = Vec::new();
        for slice in &stack.slices {
            let meta = &slice.meta[0];
            images.push(
                slice
                    .frames
                    .iter()
                    .zip(&slice.meta)
                    .map(|(f, m)| prep_image(&f.to_f32(), m, recipe))
                    .collect::<Result<Vec<_>, _>>()?,
            );
            let spacing = match recipe.method {
                Method::M2T0 => (meta.pixel_spacing_row * meta.pixel_spacing_col).sqrt(),
                _ => recipe.target_spacing,
            };
            geoms.push(SliceGeom {
                frames: slice.frames.len(),
                ipp: meta.ipp,
                iop: meta.iop,
                acquisition_index: meta.acquisition_index,
                pixel_spacing_mm: spacing,
            });
        }
        let masks = match masks {
            Some(grid) => Some(
                grid.iter()
                    .zip(&stack.slices)
                    .map(|(row, slice)| {
                        row.iter()
                            .zip(&slice.meta)
                            .map(|(m, meta)| {
                                m.as_ref()
                                    .map(|m| preprocess_mask(m, meta, recipe))
                                    .transpose()
                            })
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            None => None,
        };
        let first = &stack.slices[0].meta[0];
        let bundle = Bundle {
            header: Header {
                patient_id: id.clone(),
                rows: recipe.crop_size,
                cols: recipe.crop_size,
                age: first.patient_age,
                sex: first.patient_sex,
                slices: geoms,
                has_images: true,
                mask_present: None,
            },
            images: Some(images),
            masks,
        };
        bundle.write(&out.join(&id))?;
        eprintln!("preprocess: {id}");
        Ok(id)
    })
}

fn samples(bundle: &Bundle) -> Vec<Sample> {
    let (Some(images), Some(masks)) = (&bundle.images, &bundle.masks) else {
        return vec![];
    };
    images
        .iter()
        .flatten()
        .zip(masks.iter().flatten())
        .filter_map(|(im, m)| {
            m.as_ref().map(|m| Sample {
                image: im.clone(),
                mask: m.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct SplitRecord<'a> {
    seed: u64,
    train: &'a [String],
    val: &'a [String],
    test: &'a [String],
}

/// Trains a model on every prepared patient that has ground-truth masks.
/// Writes `model.lvw`, `history.csv` and `split.json`; returns the weight path.
pub fn train(cfg: &Config, prepared: &Path, out: &Path) -> anyhow::Result<PathBuf> {
    let bundles: Vec<Bundle> = list_bundles(prepared)?
        .iter()
        .map(|d| Bundle::read(d))
        .collect::<anyhow::Result<_>>()?;
    let by_id: BTreeMap<String, Vec<Sample>> = bundles
        .iter()
        .map(|b| (b.patient_id().to_owned(), samples(b)))
        .filter(|(_, s)| !s.is_empty())
        .collect();
    let ids: Vec<&String> = by_id.keys().collect();
    let (train_ids, val_ids, test_ids) = split_patients(&ids, cfg.seed)?;
    let gather = |ids: &[String]| {
        ids.iter()
            .flat_map(|id| by_id[id].iter().cloned())
            .collect::<Vec<_>>()
    };
    let (train_set, val_set) = (gather(&train_ids), gather(&val_ids));
    eprintln!(
        "train: {} patients ({} images) train, {} ({} images) val, {} held out",
        train_ids.len(),
        train_set.len(),
        val_ids.len(),
        val_set.len(),
        test_ids.len()
    );
    let model = build_model(&cfg.model)?;
    let (model, history) = train_with(model, &train_set, &val_set, &cfg.train, |rec| {
        let dsc = rec
            .val
            .map_or(String::from("-"), |m| format!("{:.4}", m.dsc));
        eprintln!(
            "train: epoch {} loss {:.5} val_dsc {dsc}",
            rec.epoch, rec.loss
        );
        true
    })?;
    fs::create_dir_all(out)?;
    let weights = out.join("model.lvw");
    save_weights(&model, &weights)?;
    write_history_csv(&history, fs::File::create(out.join("history.csv"))?)?;
    let split = SplitRecord {
        seed: cfg.seed,
        train: &train_ids,
        val: &val_ids,
        test: &test_ids,
    };
    fs::write(
        out.join("split.json"),
        serde_json::to_string_pretty(&split)? + "\n",
    )?;
    Ok(weights)
}

#[derive(Clone, Debug)]
pub enum MaskSource {
    Weights(Vec<PathBuf>),
    /// Bundles whose stored masks stand in for predictions.
    Oracle(PathBuf),
}

/// Predicts a mask for every frame of every prepared patient.
pub fn segment(
    cfg: &Config,
    prepared: &Path,
    source: &MaskSource,
    out: &Path,
) -> anyhow::Result<Vec<String>> {
    let models = match source {
        MaskSource::Weights(paths) => {
            if paths.is_empty() {
                return Err(Invalid(
                    "segment needs at least one weight file or --oracle-masks".into(),
                )
                .into());
            }
            paths
                .iter()
                .map(|p| load_weights(p).with_context(|| format!("loading {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?
        }
        MaskSource::Oracle(_) => vec![],
    };
    let dirs = list_bundles(prepared)?;
    let threshold = cfg.segment.threshold;
    par_map(cfg, &dirs, |dir| {
        let bundle = Bundle::read(dir)?;
        let id = bundle.patient_id().to_owned();
        let masks = match source {
            MaskSource::Oracle(root) => {
                let oracle = Bundle::read(&root.join(&id))
                    .with_context(|| format!("oracle masks for {id}"))?;
                let Some(masks) = oracle.masks else {
                    return Err(DataError(format!("oracle bundle for {id} has no masks")).into());
                };
                if (oracle.header.rows, oracle.header.cols)
                    != (bundle.header.rows, bundle.header.cols)
                {
                    return Err(
                        DataError(format!("oracle masks for {id} have a different size")).into(),
                    );
                }
                masks
            }
            MaskSource::Weights(_) => {
                let Some(images) = &bundle.images else {
                    return Err(DataError(format!("bundle for {id} has no images")).into());
                };
                let mut grid = Vec::with_capacity(images.len());
                for slice in images {
                    let probs: Vec<Vec<Image<f32>>> = models
                        .iter()
                        .map(|m| m.predict(slice))
                        .collect::<Result<_, _>>()?;
                    let row = (0..slice.len())
                        .map(|f| {
                            let per_model: Vec<Image<f32>> =
                                probs.iter().map(|p| p[f].clone()).collect();
                            let mask = match cfg.segment.ensemble {
                                EnsembleMode::Majority => {
                                    let bins: Vec<Mask> =
                                        per_model.iter().map(|p| binarize(p, threshold)).collect();
                                    ensemble_majority(&bins)?
                                }
                                EnsembleMode::Average => ensemble_average(&per_model)?,
                            };
                            Ok(Some(mask))
                        })
                        .collect::<anyhow::Result<Vec<_>>>()?;
                    grid.push(row);
                }
                grid
            }
        };
        bundle.with_masks(masks).write(&out.join(&id))?;
        eprintln!("segment: {id}");
        Ok(id)
    })
}

/// Removes extra components from every patient's masks.
pub fn postproc(cfg: &Config, masks: &Path, out: &Path) -> anyhow::Result<Vec<String>> {
    let dirs = list_bundles(masks)?;
    let p = &cfg.postproc;
    par_map(cfg, &dirs, |dir| {
        let bundle = Bundle::read(dir)?;
        let id = bundle.patient_id().to_owned();
        let Some(grid) = &bundle.masks else {
            return Err(DataError(format!("bundle for {id} has no masks")).into());
        };
        let flat: Vec<Mask> = grid.iter().flatten().flatten().cloned().collect();
        let mut filtered =
            filter_patient(&flat, p.method, p.connectivity, p.center_fraction)?.into_iter();
        let out_grid = grid
            .iter()
            .map(|row| {
                row.iter()
                    .map(|m| {
                        m.as_ref()
                            .map(|_| filtered.next().expect("one output per mask"))
                    })
                    .collect()
            })
            .collect();
        bundle.with_masks(out_grid).write(&out.join(&id))?;
        Ok(id)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub patient_id: String,
    pub esv_ml: Option<f64>,
    pub edv_ml: Option<f64>,
    pub ef: Option<f64>,
    pub n_slices: Option<usize>,
    pub flags: String,
    pub status: String,
}

/// ESV, EDV and EF per patient, written to `out` as CSV. A patient whose
/// volumes cannot be computed gets a row with an error status.
pub fn volume(
    cfg: &Config,
    masks: &Path,
    esv_masks: Option<&Path>,
    out: &Path,
) -> anyhow::Result<Vec<VolumeRow>> {
    let dirs = list_bundles(masks)?;
    let mut rows = par_map(cfg, &dirs, |dir| {
        let bundle = Bundle::read(dir)?;
        let age = bundle.header.age.map(f64::from);
        let estimate = |slices: &[SliceMasks]| {
            if cfg.volume.fallback {
                volumes_with_fallback(slices, cfg.volume.mode, age, bundle.header.sex)
            } else {
                patient_volumes(slices, cfg.volume.mode)
            }
        };
        let edv = estimate(&bundle.slice_masks()?);
        let result = match esv_masks {
            Some(root) => {
                let other = Bundle::read(&root.join(bundle.patient_id()))?;
                let esv = estimate(&other.slice_masks()?);
                edv.and_then(|edv| esv.map(|esv| combine_phases(&esv, &edv)))
            }
            None => edv,
        };
        let id = bundle.patient_id().to_owned();
        Ok(match result {
            Ok(r) => VolumeRow {
                patient_id: id,
                esv_ml: Some(r.esv_ml),
                edv_ml: Some(r.edv_ml),
                ef: r.ef,
                n_slices: Some(r.n_slices),
                flags: r.flags_string(),
                status: "ok".into(),
            },
            Err(e) => {
                eprintln!("volume: {id}: {e}");
                VolumeRow {
                    patient_id: id,
                    esv_ml: None,
                    edv_ml: None,
                    ef: None,
                    n_slices: None,
                    flags: String::new(),
                    status: format!("error: {e}"),
                }
            }
        })
    })?;
    rows.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    if rows.iter().all(|r| r.status != "ok") {
        return Err(DataError("no patient produced a volume".into()).into());
    }
    Ok(rows)
}

#[derive(Clone, Debug, Deserialize)]
struct TruthRow {
    patient_id: String,
    esv_ml: f64,
    edv_ml: f64,
}

/// Compares predicted volumes with reference volumes and writes the report
/// files into `out`. Patients missing from either side are skipped with a
/// warning.
pub fn eval(cfg: &Config, volumes: &Path, truth: &Path, out: &Path) -> anyhow::Result<EvalReport> {
    let read_pred = || -> anyhow::Result<Vec<VolumeRow>> {
        csv::Reader::from_path(volumes)?
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(Into::into)
    };
    let pred = read_pred().with_context(|| format!("reading {}", volumes.display()))?;
    let truth: Vec<TruthRow> = csv::Reader::from_path(truth)
        .and_then(|mut r| r.deserialize().collect::<Result<_, _>>())
        .with_context(|| format!("reading {}", truth.display()))?;
    let truth: BTreeMap<String, TruthRow> = truth
        .into_iter()
        .map(|t| (t.patient_id.clone(), t))
        .collect();
    let mut rows = Vec::new();
    for p in pred {
        let (Some(esv), Some(edv)) = (p.esv_ml, p.edv_ml) else {
            eprintln!("eval: {}: no predicted volume ({})", p.patient_id, p.status);
            continue;
        };
        let Some(t) = truth.get(&p.patient_id) else {
            eprintln!("eval: {}: no reference volume", p.patient_id);
            continue;
        };
        rows.push(PatientRow {
            patient_id: p.patient_id,
            actual_esv: t.esv_ml,
            actual_edv: t.edv_ml,
            pred_esv: esv,
            pred_edv: edv,
            flags: p.flags,
        });
    }
    if rows.is_empty() {
        return Err(
            DataError("no patient has both a predicted and a reference volume".into()).into(),
        );
    }
    let report = EvalReport::new(rows, &cfg.bands()?)?;
    emit_report(&report, out)?;
    Ok(report)
}
