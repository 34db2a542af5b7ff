use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lvseg::ingest::{DicomBuilder, ImageMeta, NiftiDatatype, NiftiVolume, NiftiWriter, Sex};
use lvseg::Image;

const SIZE: usize = 48;
const ED_RADII: [f64; 6] = [7.0, 12.0, 14.0, 13.0, 10.0, 5.0];

fn lvseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvseg"))
        .args(args)
        .output()
        .unwrap()
}

fn run_dir(out: &Output) -> PathBuf {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .expect("run directory line");
    PathBuf::from(line)
}

fn disc(r: f64, inside: f32, outside: f32) -> impl Fn(usize, usize) -> f32 {
    let c = (SIZE as f64 - 1.0) / 2.0;
    move |y, x| {
        if (y as f64 - c).hypot(x as f64 - c) <= r {
            inside
        } else {
            outside
        }
    }
}

/// Two frames per slice: end-diastole, then end-systole at 75% radius.
fn phantom(scale: f64) -> (NiftiVolume, NiftiVolume) {
    let (slices, frames) = (ED_RADII.len(), 2);
    let mut img = Vec::new();
    let mut lab = Vec::new();
    for &r in &ED_RADII {
        for f in 0..frames {
            let r = r * scale * if f == 0 { 1.0 } else { 0.75 };
            let i = disc(r, 900.0, 100.0);
            let l = disc(r, 3.0, 0.0);
            for y in 0..SIZE {
                for x in 0..SIZE {
                    img.push(i(y, x));
                    lab.push(l(y, x));
                }
            }
        }
    }
    let vol = |data, dt| NiftiVolume {
        slices,
        frames,
        rows: SIZE,
        cols: SIZE,
        spacing: [1.0, 1.0, 10.0],
        datatype: dt,
        data,
    };
    (vol(img, NiftiDatatype::U16), vol(lab, NiftiDatatype::U8))
}

fn write_nifti_dataset(dir: &Path, patients: &[(&str, f64)]) {
    fs::create_dir_all(dir).unwrap();
    for &(id, scale) in patients {
        let (img, lab) = phantom(scale);
        fs::write(
            dir.join(format!("{id}.nii")),
            NiftiWriter::new(NiftiDatatype::U16).write(&img),
        )
        .unwrap();
        fs::write(
            dir.join(format!("{id}_gt.nii")),
            NiftiWriter::new(NiftiDatatype::U8).write(&lab),
        )
        .unwrap();
    }
}

fn write_config(dir: &Path, model: &str, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(
        &path,
        format!("[preprocess]\ncrop_size = 48\n[model]\ninput_size = 48\n{model}\n{extra}"),
    )
    .unwrap();
    path
}

#[test]
fn oracle_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("nifti");
    write_nifti_dataset(&data, &[("p01", 1.0), ("p02", 1.2), ("p03", 0.9)]);
    let truth = tmp.path().join("truth.csv");
    fs::write(
        &truth,
        "patient_id,esv_ml,edv_ml\np01,10,20\np02,14,30\np03,8,16\n",
    )
    .unwrap();
    let cfg = write_config(tmp.path(), "", "[volume]\nfallback = false\n");
    let runs = tmp.path().join("runs");
    let args = [
        "pipeline",
        "--nifti",
        data.to_str().unwrap(),
        "--oracle",
        "--truth",
        truth.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--runs-dir",
        runs.to_str().unwrap(),
        "--jobs",
        "2",
    ];
    let out = lvseg(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = run_dir(&out);
    assert!(run.starts_with(&runs));
    let resolved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("crop_size = 48"));

    let mut rd = csv::Reader::from_path(run.join("volumes.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(
        rows.iter().map(|r| r[0].to_string()).collect::<Vec<_>>(),
        ["p01", "p02", "p03"]
    );
    for r in &rows {
        let (esv, edv, ef): (f64, f64, f64) = (
            r[1].parse().unwrap(),
            r[2].parse().unwrap(),
            r[3].parse().unwrap(),
        );
        assert!(esv < edv && edv > 1.0, "{r:?}");
        // Areas scale with r², so ES is about 0.75² of ED on every slice.
        assert!((ef - (1.0 - 0.5625)).abs() < 0.05, "{r:?}");
    }
    for f in [
        "volumes.csv",
        "summary.json",
        "scatter_ef.csv",
        "residuals_edv.csv",
    ] {
        assert!(run.join("report").join(f).is_file(), "{f}");
    }

    // Same inputs, same config: identical volumes in a new run directory.
    let again = lvseg(&args);
    let run2 = run_dir(&again);
    assert_ne!(run, run2);
    assert_eq!(
        fs::read(run.join("volumes.csv")).unwrap(),
        fs::read(run2.join("volumes.csv")).unwrap()
    );

    // ESV taken from a second mask set; with the same masks nothing changes.
    let filtered = run.join("filtered");
    let split = lvseg(&[
        "volume",
        "--masks",
        filtered.to_str().unwrap(),
        "--esv-masks",
        filtered.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--runs-dir",
        runs.to_str().unwrap(),
    ]);
    assert!(
        split.status.success(),
        "{}",
        String::from_utf8_lossy(&split.stderr)
    );
    assert_eq!(
        fs::read(run_dir(&split).join("volumes.csv")).unwrap(),
        fs::read(run.join("volumes.csv")).unwrap()
    );
}

#[test]
fn stage_by_stage_with_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("nifti");
    write_nifti_dataset(&data, &[("a", 1.0), ("b", 1.1), ("c", 0.9), ("d", 1.2)]);
    let cfg = write_config(
        tmp.path(),
        "base_filters = 2\nconv_layers = 18\ndropout_rate = 0.0",
        "[train]\nepochs = 1\nbatch_size = 4\n",
    );
    let runs = tmp.path().join("runs");
    let common = [
        "--config",
        cfg.to_str().unwrap(),
        "--runs-dir",
        runs.to_str().unwrap(),
    ];
    let step = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend_from_slice(&common);
        let out = lvseg(&all);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        run_dir(&out)
    };
    let ingest = step(&["ingest", "--nifti", data.to_str().unwrap()]);
    let studies = ingest.join("studies");
    assert!(studies.join("a").join("manifest.json").is_file());
    let roi = step(&["roi", "--studies", studies.to_str().unwrap()]);
    assert!(roi.join("roi").join("a.json").is_file());
    let prep = step(&["preprocess", "--studies", studies.to_str().unwrap()]);
    let prepared = prep.join("prepared");
    let train = step(&[
        "train",
        "--prepared",
        prepared.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    let weights = train.join("model").join("model.lvw");
    assert!(weights.is_file());
    assert_eq!(
        fs::read_to_string(train.join("model").join("history.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let seg = step(&[
        "segment",
        "--prepared",
        prepared.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
    ]);
    let post = step(&["postproc", "--masks", seg.join("masks").to_str().unwrap()]);
    assert!(post
        .join("filtered")
        .join("d")
        .join("bundle.json")
        .is_file());
    // An untrained model may produce empty masks; the stage still reports per patient.
    let out = lvseg(
        &[
            &["volume", "--masks", post.join("filtered").to_str().unwrap()],
            &common[..],
        ]
        .concat(),
    );
    assert!(matches!(out.status.code(), Some(0) | Some(3)));
}

#[test]
fn dicom_ingest_groups_slices() {
    let tmp = tempfile::tempdir().unwrap();
    let pdir = tmp.path().join("dicom").join("case1");
    fs::create_dir_all(&pdir).unwrap();
    for s in 0..3 {
        for f in 0..4 {
            let mut meta = ImageMeta::axial(16, 16, 1.5, s as f64 * 8.0);
            meta.acquisition_index = 1;
            meta.patient_age = Some(44);
            meta.patient_sex = Sex::F;
            let px = Image::from_fn(16, 16, |r, c| (r * 16 + c + s * 1000 + f) as u16);
            fs::write(
                pdir.join(format!("s{s}_f{f}.dcm")),
                DicomBuilder::from_image(&meta, &px).build(),
            )
            .unwrap();
        }
    }
    fs::write(pdir.join("s1_f0.txt"), "4 4\n12 4\n12 12\n4 12\n").unwrap();
    let runs = tmp.path().join("runs");
    let out = lvseg(&[
        "ingest",
        "--dicom",
        tmp.path().join("dicom").to_str().unwrap(),
        "--runs-dir",
        runs.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let study = run_dir(&out).join("studies").join("case1");
    let stack = lvseg::ingest::load_study(&study).unwrap();
    assert_eq!((stack.num_slices(), stack.num_frames()), (3, 4));
    assert_eq!(stack.slices[2].frames[3].get(0, 0), 2003);
    assert_eq!(stack.slices[0].meta[0].patient_sex, Sex::F);
    let masks = lvseg::ingest::load_masks(&study).unwrap().unwrap();
    assert!(masks[1][0].as_ref().unwrap().count_ones() > 0);
    assert!(masks[0][0].is_none());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let runs = runs.to_str().unwrap();

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[model]\ninput_size = 50\n").unwrap();
    let out = lvseg(&[
        "volume",
        "--masks",
        ".",
        "--config",
        bad.to_str().unwrap(),
        "--runs-dir",
        runs,
    ]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(&bad, "[eval]\nef_cuts = [0.6, 0.4]\n").unwrap();
    let out = lvseg(&[
        "volume",
        "--masks",
        ".",
        "--config",
        bad.to_str().unwrap(),
        "--runs-dir",
        runs,
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = lvseg(&[
        "volume",
        "--masks",
        tmp.path().join("missing").to_str().unwrap(),
        "--runs-dir",
        runs,
    ]);
    assert_eq!(out.status.code(), Some(3));

    let junk = tmp.path().join("junk");
    fs::create_dir_all(junk.join("p")).unwrap();
    fs::write(junk.join("p").join("x.dcm"), b"not a dicom file").unwrap();
    let out = lvseg(&[
        "ingest",
        "--dicom",
        junk.to_str().unwrap(),
        "--runs-dir",
        runs,
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = lvseg(&["segment", "--prepared", ".", "--runs-dir", runs]);
    assert_eq!(out.status.code(), Some(2));
    let out = lvseg(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}
