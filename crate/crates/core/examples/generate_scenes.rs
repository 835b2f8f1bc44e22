//! Writes a deterministic synthetic scene fixture for trying the CLI:
//!
//! ```text
//! cargo run --example generate_scenes -- <out_dir> [seed] [count]
//! layerlab curate <out_dir> <dataset_dir> --mock --seed 42 \
//!     --tau-local 0.98 --tau-global 0.9 --tau-dup 0.995
//! ```

use layerlab_core::dataset::image_to_png;
use layerlab_core::fixtures::demo_scenes;

fn main() {
    let mut args = std::env::args().skip(1);
    let out_dir = args.next().unwrap_or_else(|| "scenes".to_string());
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(42);
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);

    std::fs::create_dir_all(&out_dir).expect("create output directory");
    for (name, image) in demo_scenes(seed, count).expect("build scenes") {
        let path = format!("{out_dir}/{name}.png");
        std::fs::write(&path, image_to_png(&image).expect("encode png")).expect("write png");
        println!("wrote {path}");
    }
}
