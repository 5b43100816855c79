//! Regenerate the meshes under `meshes/`.
//!
//! ```text
//! cargo run -p cfdgcn --example generate_meshes -- meshes
//! ```

use std::path::PathBuf;

use cfdgcn::mesh::write_su2;
use cfdgcn::meshgen::{desk_coarse, desk_fine, tiny, Naca4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "meshes".into()));
    std::fs::create_dir_all(&dir)?;
    for code in ["0012", "4412"] {
        let section = Naca4::parse(code).ok_or("bad section")?;
        std::fs::write(
            dir.join(format!("naca{code}_fine.su2")),
            write_su2(&desk_fine(section).build()),
        )?;
        std::fs::write(
            dir.join(format!("naca{code}_coarse.su2")),
            write_su2(&desk_coarse(section).build()),
        )?;
    }

    // gradient-check pair; the coarse interior ring is jittered off the
    // symmetric grid so no neighbor distances tie
    let section = Naca4::parse("0012").ok_or("bad section")?;
    std::fs::write(dir.join("tiny_fine.su2"), write_su2(&tiny(section, 6, 4).build()))?;
    let mut coarse = tiny(section, 4, 3).build();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for p in &mut coarse.nodes[4..8] {
        p[0] += rng.gen_range(-0.1..0.1);
        p[1] += rng.gen_range(-0.1..0.1);
    }
    std::fs::write(dir.join("tiny_coarse.su2"), write_su2(&coarse))?;
    Ok(())
}
