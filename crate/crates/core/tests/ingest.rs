use std::path::Path;

use histotune_core::stain::{normalize_image, MacenkoParams, StainBasis};
use histotune_core::tiling::{load_class_dataset, rescale_to_mpp, tile_image, PatientManifest};
use histotune_core::Error;
use image::{Rgb, RgbImage};

fn write_png(path: &Path, color: [u8; 3]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    RgbImage::from_pixel(4, 4, Rgb(color)).save(path).unwrap();
}

#[test]
fn class_folders_load_in_lexicographic_order() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["b.png", "a.png", "c.png"] {
        write_png(&dir.path().join("TUM").join(name), [200, 100, 150]);
    }
    for name in ["z.png", "y.png"] {
        write_png(&dir.path().join("ADI").join(name), [240, 240, 240]);
    }
    // the lexicographically first folder is ADI
    let ds = load_class_dataset(dir.path()).unwrap();
    assert_eq!(ds.class_names, vec!["ADI", "TUM"]);
    assert_eq!(ds.labels, vec![0, 0, 1, 1, 1]);
    assert_eq!(ds.tiles[0].source_id, "ADI/y.png");
    let again = load_class_dataset(dir.path()).unwrap();
    assert_eq!(again.tiles, ds.tiles);
}

#[test]
fn single_class_root_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("ONLY").join("a.png"), [1, 2, 3]);
    assert!(matches!(load_class_dataset(dir.path()), Err(Error::InvalidDataset(_))));
}

#[test]
fn nine_tissue_classes() {
    let dir = tempfile::tempdir().unwrap();
    let names = ["TUM", "STR", "NORM", "MUS", "MUC", "LYM", "DEB", "BACK", "ADI"];
    for n in names {
        write_png(&dir.path().join(n).join("x.png"), [100, 50, 120]);
    }
    let ds = load_class_dataset(dir.path()).unwrap();
    let mut sorted: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    sorted.sort();
    assert_eq!(ds.n_classes(), 9);
    assert_eq!(ds.class_names, sorted);
}

#[test]
fn manifest_round_trip() {
    let base = Path::new("/data");
    let text = "patient_id,image_path,mpp\nP2,slides/b.png,0.5\nP1,slides/a.png,0.25\n";
    let m = PatientManifest::parse(text, base).unwrap();
    assert_eq!(m.rows.len(), 2);
    assert_eq!(m.rows[0].image_path, base.join("slides/b.png"));
    assert_eq!(PatientManifest::parse(&m.to_csv(base), base).unwrap(), m);
    assert!(PatientManifest::parse("patient_id,image_path,mpp\nP1,a.png,-1\n", base).is_err());
}

#[test]
fn half_resolution_scan_doubles_in_size_then_tiles() {
    let img = RgbImage::from_fn(10, 6, |x, y| Rgb([(x * 20) as u8, (y * 30) as u8, 90]));
    let up = rescale_to_mpp(&img, 0.5, 0.25).unwrap();
    assert_eq!(up.dimensions(), (20, 12));
    assert_eq!(rescale_to_mpp(&img, 0.25, 0.25).unwrap(), img);
    let tiles = tile_image(&up, 4, 4, "s").unwrap();
    assert_eq!(tiles.len(), 5 * 3);
    assert_eq!(tiles[5].grid_xy, (0, 1));
}

#[test]
fn normalization_is_idempotent() {
    let reference = StainBasis::reference();
    let img = RgbImage::from_fn(40, 40, |x, y| {
        let c = [0.05 * (x % 20) as f64, 0.04 * (y % 25) as f64];
        let od = reference.compose(c);
        Rgb(od.map(|v| (255.0 * 10f64.powf(-v) - 1.0).round().clamp(0.0, 255.0) as u8))
    });
    let once = normalize_image(&img, &reference, &MacenkoParams::default()).unwrap();
    let twice = normalize_image(&once, &reference, &MacenkoParams::default()).unwrap();
    let worst = once
        .pixels()
        .zip(twice.pixels())
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] as i32 - b[k] as i32).abs()))
        .max()
        .unwrap();
    assert!(worst <= 2, "max channel change {worst}");
}
