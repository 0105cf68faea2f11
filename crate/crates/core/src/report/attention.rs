//! Attention heatmap export.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernel::Mode;
use crate::model::{forward, ModelParams};
use crate::pgm;
use crate::scenegen::{quadrant_origin, QUADRANTS, SCENE_PIXELS, SCENE_SIDE};

/// Canvas where every quadrant is a flat fill of its attention value.
pub fn heatmap(row: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; SCENE_PIXELS];
    let half = SCENE_SIDE / 2;
    for (q, &a) in row.iter().enumerate().take(QUADRANTS) {
        let (r0, c0) = quadrant_origin(q);
        for r in r0..r0 + half {
            out[r * SCENE_SIDE + c0..r * SCENE_SIDE + c0 + half].fill(a);
        }
    }
    out
}

/// Writes `<stem>_scene.pgm`, `<stem>_attention.csv` (one row per caption
/// word, one column per quadrant) and `<stem>_word<j>_<id>.pgm` per word.
pub fn export_attention(
    params: &ModelParams<f32>,
    scene: &[f32],
    caption: &[u8],
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    // evaluation mode never draws from the generator
    let out = forward(scene, caption, params, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut files = Vec::new();
    let scene_path = dir.join(format!("{stem}_scene.pgm"));
    pgm::write_unit(&scene_path, SCENE_SIDE, SCENE_SIDE, scene)?;
    files.push(scene_path);

    let csv_path = dir.join(format!("{stem}_attention.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["position", "word", "q0", "q1", "q2", "q3"])?;
    for (j, &word) in caption.iter().enumerate() {
        let mut rec = vec![j.to_string(), word.to_string()];
        rec.extend(out.attention.row(j).iter().map(|a| a.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    files.push(csv_path);

    for (j, &word) in caption.iter().enumerate() {
        let p = dir.join(format!("{stem}_word{j}_{word}.pgm"));
        pgm::write_unit(&p, SCENE_SIDE, SCENE_SIDE, &heatmap(out.attention.row(j)))?;
        files.push(p);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Arch};

    #[test]
    fn heatmap_fills_quadrants() {
        let h = heatmap(&[1.0, 0.0, 0.5, 0.25]);
        let g: Vec<u8> = h.iter().map(|&v| pgm::to_gray(v)).collect();
        assert_eq!(g[0], 255);
        assert_eq!(g[27 * 56 + 27], 255);
        assert_eq!(g[28], 0);
        assert_eq!(g[28 * 56], 128);
        assert_eq!(g[55 * 56 + 55], 64);
    }

    #[test]
    fn export_writes_csv_and_valid_pgms() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(Arch::ObjectCnn, 1);
        let scene: Vec<f32> = (0..SCENE_PIXELS).map(|i| (i % 7) as f32 / 7.0).collect();
        let files = export_attention(&params, &scene, &[3, 8], dir.path(), "t").unwrap();
        assert_eq!(files.len(), 4);
        let csv = fs::read_to_string(dir.path().join("t_attention.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 6));
        for f in files.iter().filter(|f| f.extension().unwrap() == "pgm") {
            let b = fs::read(f).unwrap();
            assert!(b.starts_with(b"P5\n56 56\n255\n"));
            assert_eq!(b.len(), 13 + SCENE_PIXELS);
        }
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let params = init_params(Arch::ObjectCnn, 1);
        let r = export_attention(&params, &vec![0.0; SCENE_PIXELS], &[1], &blocker.join("sub"), "t");
        assert!(matches!(r, Err(crate::Error::Io(_))));
    }
}
