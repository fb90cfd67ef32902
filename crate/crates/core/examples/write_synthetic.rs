//! Regenerates the bundled synthetic fixtures: `cargo run --example write_synthetic [DIR]`.

use gmner_agent::synthetic::{bundled_dir, World};

fn main() -> std::io::Result<()> {
    let dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(bundled_dir);
    World::standard().write(&dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}
