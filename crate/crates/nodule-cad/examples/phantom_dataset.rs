//! Generate a small synthetic phantom dataset: noisy lung-like volumes with
//! spherical nodules (annotated) and vessel-like cylinders (distractors).
//!
//!     cargo run --example phantom_dataset [OUT_DIR]

use nodule_cad::ct::{generate_phantom, save_annotations, save_volume, ElementType, PhantomParams};
use std::path::PathBuf;

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/example-runs/phantoms".into())
        .into();
    std::fs::create_dir_all(&out).unwrap();

    let params = PhantomParams {
        sphere_count: 4,
        vessel_count: 4,
        ..PhantomParams::default()
    };
    let mut annotations = Vec::new();
    for i in 0..4u64 {
        let uid = format!("phantom-{i:03}");
        let (vol, annos) = generate_phantom(&uid, 42 + i, &params).unwrap();
        let (nx, ny, nz) = vol.extents();
        let mean = vol.data().iter().sum::<f64>() / vol.data().len() as f64;
        println!(
            "{uid}: {nx}x{ny}x{nz} voxels, mean {mean:.1} HU, {} nodules",
            annos.len()
        );
        for a in &annos {
            println!(
                "    nodule d={:.1} mm at ({:.1}, {:.1}, {:.1}) mm",
                a.diameter_mm, a.center[0], a.center[1], a.center[2]
            );
        }
        save_volume(&vol, &out.join(format!("{uid}.mhd")), ElementType::Float).unwrap();
        annotations.extend(annos);
    }
    save_annotations(&out.join("annotations.csv"), &annotations).unwrap();
    println!("dataset written to {}", out.display());
}
